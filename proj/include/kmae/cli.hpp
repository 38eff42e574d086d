// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the kmae CLI. Exit codes: 0 success,
// 1 usage error (handled by the parser), 2 data/config validation error,
// 3 numerical failure.
#pragma once

#include <string>
#include <vector>

namespace kmae::cli {

struct GenArgs {
  std::string out;
  int subjects = 200;
  int size = 32;
  int frames = 8;
  int slices = 3;
  std::string mode = "classify";  // classify | regress
  double class_balance = 0.5;
  uint64_t seed = 0;
  std::string config_path;  // optional phantom overrides
};

struct MasksArgs {
  int num_lines = 32;   // H
  int frames = 8;       // T
  double acceleration = 4.0;
  int acs_count = -1;
  uint64_t seed = 0;
  std::string out;
};

struct PretrainArgs {
  std::string data;
  std::string config_path;  // optional
  std::string out_ckpt;
  int epochs = -1;          // -1: from config
  long long seed = -1;      // -1: from config
};

struct FinetuneArgs {
  std::string ckpt;  // empty allowed for --arch cnn
  std::string data;
  std::string task;
  double acceleration = 4.0;
  bool freeze_encoder = false;
  std::string out_ckpt;
  std::string arch = "kmae";  // kmae | cnn
  int epochs = -1;
  long long seed = -1;
  std::string config_path;
};

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "test";
  std::string r_list = "1,4,8";
  std::string report;
  std::string predictions;  // default: <report>.pred.kmae
  uint64_t seed = 0;
};

int cmd_gen(const GenArgs& a);
int cmd_masks(const MasksArgs& a);
int cmd_pretrain(const PretrainArgs& a);
int cmd_finetune(const FinetuneArgs& a);
int cmd_eval(const EvalArgs& a);

}  // namespace kmae::cli
