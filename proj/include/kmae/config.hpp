// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document covering the model, task, training
// knobs, phantom defaults and mask parameters. Every field has a default;
// unknown keys are rejected.
#pragma once

#include <string>

#include <json.hpp>

#include "kmae/model.hpp"
#include "kmae/phantom.hpp"
#include "kmae/train_eval.hpp"

namespace kmae {

struct MaskConfig {
  double acceleration = 4.0;
  int acs_count = -1;  // -1: default_acs_count(H, R)
};

struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainOptions train;
  PhantomParams phantom;
  MaskConfig mask;

  nlohmann::json to_json() const;
  // missing keys take defaults; unknown keys are an error
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);

  std::string config_hash() const { return json_digest(to_json()); }
};

std::string loss_support_name(LossSupport s);
LossSupport loss_support_from_name(const std::string& s);

}  // namespace kmae
