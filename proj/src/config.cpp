// SPDX-License-Identifier: Apache-2.0
#include "kmae/config.hpp"

#include <fstream>

namespace kmae {

std::string loss_support_name(LossSupport s) {
  return s == LossSupport::all ? "all" : "missing_only";
}

LossSupport loss_support_from_name(const std::string& s) {
  if (s == "all") return LossSupport::all;
  if (s == "missing_only") return LossSupport::missing_only;
  throw ConfigError("unknown loss_support '" + s + "'");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["model"] = model.to_json();
  j["task"] = {{"task", task_name(task.task)},
               {"input_r", task.input_r},
               {"freeze_encoder", task.freeze_encoder},
               {"epochs", task.epochs},
               {"batch_size", task.batch_size},
               {"seed", task.seed}};
  j["train"] = {{"lr_peak", train.lr_peak},
                {"warmup_frac", train.warmup_frac},
                {"loss_support", loss_support_name(train.loss_support)},
                {"b0_amplitude", train.b0_amplitude},
                {"b0_sigma_frac", train.b0_sigma_frac},
                {"b0_resample_per_epoch", train.b0_resample_per_epoch},
                {"mask_resample_per_epoch", train.mask_resample_per_epoch},
                {"r_augment_per_epoch", train.r_augment_per_epoch},
                {"huber_delta", train.huber_delta}};
  j["phantom"] = {{"grid_size", phantom.grid_size},
                  {"frames", phantom.frames},
                  {"slices", phantom.slices},
                  {"base_cavity_radius", phantom.base_cavity_radius},
                  {"contraction", phantom.contraction},
                  {"wall_area", phantom.wall_area},
                  {"intensity_blood", phantom.intensity_blood},
                  {"intensity_myo", phantom.intensity_myo},
                  {"intensity_background", phantom.intensity_background},
                  {"noise_std", phantom.noise_std}};
  j["mask"] = {{"acceleration", mask.acceleration},
               {"acs_count", mask.acs_count}};
  return j;
}

namespace {

// every key in j must exist in reference (recursing into objects)
void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& reference,
                         const std::string& prefix) {
  for (const auto& [key, value] : j.items()) {
    if (!reference.contains(key))
      throw ConfigError("unknown config key '" + prefix + key + "'");
    if (value.is_object() && reference.at(key).is_object())
      reject_unknown_keys(value, reference.at(key), prefix + key + ".");
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  reject_unknown_keys(j, c.to_json(), "");

  if (j.contains("model")) {
    nlohmann::json m = c.model.to_json();
    m.update(j.at("model"));
    if (j.at("model").contains("grid")) {
      nlohmann::json g = c.model.to_json().at("grid");
      g.update(j.at("model").at("grid"));
      m["grid"] = g;
    }
    c.model = ModelConfig::from_json(m);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    std::string name = task_name(c.task.task);
    maybe(t, "task", name);
    c.task.task = task_from_name(name);
    maybe(t, "input_r", c.task.input_r);
    maybe(t, "freeze_encoder", c.task.freeze_encoder);
    maybe(t, "epochs", c.task.epochs);
    maybe(t, "batch_size", c.task.batch_size);
    maybe(t, "seed", c.task.seed);
    c.task.validate();
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    maybe(t, "lr_peak", c.train.lr_peak);
    maybe(t, "warmup_frac", c.train.warmup_frac);
    std::string ls = loss_support_name(c.train.loss_support);
    maybe(t, "loss_support", ls);
    c.train.loss_support = loss_support_from_name(ls);
    maybe(t, "b0_amplitude", c.train.b0_amplitude);
    maybe(t, "b0_sigma_frac", c.train.b0_sigma_frac);
    maybe(t, "b0_resample_per_epoch", c.train.b0_resample_per_epoch);
    maybe(t, "mask_resample_per_epoch", c.train.mask_resample_per_epoch);
    maybe(t, "r_augment_per_epoch", c.train.r_augment_per_epoch);
    maybe(t, "huber_delta", c.train.huber_delta);
  }
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    maybe(p, "grid_size", c.phantom.grid_size);
    maybe(p, "frames", c.phantom.frames);
    maybe(p, "slices", c.phantom.slices);
    maybe(p, "base_cavity_radius", c.phantom.base_cavity_radius);
    maybe(p, "contraction", c.phantom.contraction);
    maybe(p, "wall_area", c.phantom.wall_area);
    maybe(p, "intensity_blood", c.phantom.intensity_blood);
    maybe(p, "intensity_myo", c.phantom.intensity_myo);
    maybe(p, "intensity_background", c.phantom.intensity_background);
    maybe(p, "noise_std", c.phantom.noise_std);
    // the FOV center follows the grid
    c.phantom.center_x = c.phantom.grid_size / 2.0;
    c.phantom.center_y = c.phantom.grid_size / 2.0;
  }
  if (j.contains("mask")) {
    maybe(j.at("mask"), "acceleration", c.mask.acceleration);
    maybe(j.at("mask"), "acs_count", c.mask.acs_count);
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("invalid JSON in config: " + path);
  return from_json(j);
}

}  // namespace kmae
