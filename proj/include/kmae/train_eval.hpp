// SPDX-License-Identifier: Apache-2.0
//
// Pre-training and fine-tuning loops, task losses, evaluation metrics and
// the undersampling-robustness sweep.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmae/model.hpp"
#include "kmae/phantom.hpp"

namespace kmae {

enum class Task { pretrain, regress_ef, regress_edv, classify, segment };

std::string task_name(Task t);
Task task_from_name(const std::string& s);

enum class LossSupport { all, missing_only };

struct TaskSpec {
  Task task = Task::pretrain;
  double input_r = 4.0;
  bool freeze_encoder = true;  // ignored by pretrain
  int epochs = 20;
  int batch_size = 1;
  uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("task: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("task: epochs must be >= 1");
    if (input_r < 1.0) throw ConfigError("task: acceleration must be >= 1");
  }
};

struct TrainOptions {
  double lr_peak = 1e-3;
  double warmup_frac = 0.1;
  LossSupport loss_support = LossSupport::all;
  double b0_amplitude = 1.5707963267948966;  // pi/2
  double b0_sigma_frac = 0.125;              // sigma = H/8
  bool b0_resample_per_epoch = false;
  bool mask_resample_per_epoch = false;
  // cycle the training acceleration through {input_R, 1, 8} across epochs so
  // heads stay calibrated when one model is evaluated at several R
  bool r_augment_per_epoch = false;
  int acs_count = -1;  // -1: default_acs_count(H, R)
  double huber_delta = 1.0;
};

// In-memory dataset: a cohort plus its provenance hash. Regression-mode
// datasets carry no class labels or masks.
struct Dataset {
  Cohort cohort;
  GridDims grid;
  std::string config_hash;

  bool classification_mode() const { return cohort.classification_mode; }
  int subjects() const { return static_cast<int>(cohort.records.size()); }
  void require_task_labels(Task t) const;
};

Dataset dataset_from_cohort(Cohort cohort, const nlohmann::json& gen_config);
void save_dataset(const std::string& path, const Dataset& data,
                  const nlohmann::json& gen_config);
Dataset load_dataset(const std::string& path);

// one training/evaluation item: a (subject, slice) pair with its synthetic
// acquisition chain applied
struct SliceSample {
  ComplexSeries k_full;    // B0-phased, fully sampled
  ComplexSeries k_masked;  // after line undersampling
  SamplingMask mask;
  const PhantomRecord* record = nullptr;
  int subject = 0;
  int slice = 0;
};

// The B0 field and undersampling masks are drawn from the cohort-level
// acquisition seed (one scanner field and one sampling schedule per study);
// resample_tag >= 0 draws the per-epoch variant of anything the options mark
// as resampled, -1 is the fixed draw.
SliceSample build_slice_sample(const PhantomRecord& rec, uint64_t acq_seed,
                               int subject, int slice, double r,
                               const TrainOptions& opt, bool eval_masks,
                               int resample_tag = -1);

struct MetricsReport {
  std::string task;
  std::string split;
  // formatted acceleration -> metric name -> value
  std::map<std::string, std::map<std::string, double>> per_r;
  nlohmann::json meta = nlohmann::json::object();

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

std::string format_r(double r);

struct TrainResult {
  MetricsReport report;
  std::vector<double> step_losses;
  // per-epoch rows: mean train loss, validation metric (PSNR for pretrain)
  std::vector<std::pair<double, double>> epoch_curve;
};

// K-space (or image-domain) interpolation pre-training with per-epoch
// validation PSNR and best-validation parameter retention.
TrainResult pretrain(KmaeModel<float>& model, const Dataset& data,
                     const TaskSpec& spec, const TrainOptions& opt);

// Task fine-tuning. Frozen-encoder runs never touch encoder parameters and
// reuse cached encoder outputs when the per-sample inputs are static.
TrainResult finetune(KmaeModel<float>& model, const Dataset& data,
                     const TaskSpec& spec, const TrainOptions& opt);

// Per-R metrics over a split; predictions for every reported metric are
// persisted into *predictions when given.
MetricsReport evaluate(KmaeModel<float>& model, Task task, const Dataset& data,
                       int split, const std::vector<double>& r_list,
                       const TrainOptions& opt, uint64_t eval_seed,
                       Container* predictions);

// evaluate at R in {1,4,8} plus degradation deltas relative to R=1
MetricsReport robustness_sweep(KmaeModel<float>& model, Task task,
                               const Dataset& data, int split,
                               const TrainOptions& opt, uint64_t eval_seed);

// CNN baseline: same sample chain, (real, imaginary) channel stack input
TrainResult cnn_train(CnnBaseline<float>& model, const Dataset& data,
                      const TaskSpec& spec, const TrainOptions& opt);
MetricsReport cnn_evaluate(CnnBaseline<float>& model, Task task,
                           const Dataset& data, int split,
                           const std::vector<double>& r_list,
                           const TrainOptions& opt, uint64_t eval_seed,
                           Container* predictions);

// metric helpers (also used for recomputation checks)
double dice_score(std::span<const float> prob, std::span<const uint8_t> truth,
                  size_t n, float threshold = 0.5f);
double mean_baseline_mae(const Dataset& data, int split, Task task);

// zero-filled reconstruction quality over a split, the pre-training baseline
double zero_filled_psnr(const Dataset& data, int split, double r,
                        const TrainOptions& opt, uint64_t eval_seed);

}  // namespace kmae
