// SPDX-License-Identifier: Apache-2.0
#include "kmae/train_eval.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>

#include "kmae/rng.hpp"

namespace kmae {

namespace {

constexpr uint64_t kTrainMaskSalt = 0x7121;
constexpr uint64_t kEvalMaskSalt = 0xEA1;
constexpr uint64_t kB0Salt = 0xB0;

uint64_t r_bits(double r) { return std::bit_cast<uint64_t>(r); }

std::string split_name(int split) {
  switch (split) {
    case 0: return "train";
    case 1: return "val";
    case 2: return "test";
    default: return "split" + std::to_string(split);
  }
}

struct SampleRef {
  int subject;
  int slice;
};

std::vector<SampleRef> split_samples(const Dataset& data, int split) {
  std::vector<SampleRef> out;
  for (int subject : data.cohort.indices_of_split(split))
    for (int s = 0; s < data.grid.slices; ++s) out.push_back({subject, s});
  return out;
}

std::vector<float> reference_image(const PhantomRecord& rec, int slice) {
  const size_t fsz = rec.frame_size();
  const float* base = rec.image_frame(slice, 0);
  return std::vector<float>(base, base + static_cast<size_t>(rec.params.frames) * fsz);
}

// loss weight over the [2,T,H,W] stack for missing-lines-only support
Tensor<float> missing_weight(const SamplingMask& mask, int width) {
  const int t = mask.frames, h = mask.num_lines;
  std::vector<float> w(static_cast<size_t>(2) * t * h * width, 0.0f);
  const size_t plane = static_cast<size_t>(t) * h * width;
  for (int f = 0; f < t; ++f)
    for (int l = 0; l < h; ++l)
      if (!mask.sampled(f, l))
        for (int x = 0; x < width; ++x) {
          const size_t i = (static_cast<size_t>(f) * h + l) * width + x;
          w[i] = 1.0f;
          w[plane + i] = 1.0f;
        }
  return Tensor<float>::from({2, t, h, width}, std::move(w));
}

Tensor<float> patch_missing_weight(const TokenGridT<float>& grid,
                                   const ModelConfig& cfg) {
  const auto& g = cfg.grid;
  const int p = cfg.image_patch_size;
  const int pw = g.width / p;
  std::vector<float> w(static_cast<size_t>(g.frames) * g.height * g.width, 0.0f);
  size_t i = 0;
  for (int t = 0; t < g.frames; ++t)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x, ++i) {
        const int tok = (t * (g.height / p) + y / p) * pw + x / p;
        if (!grid.visibility[static_cast<size_t>(tok)]) w[i] = 1.0f;
      }
  return Tensor<float>::from({g.frames, g.height, g.width}, std::move(w));
}

struct PretrainForward {
  Tensor<float> prediction;  // [2,T,H,W] stack or [T,H,W] image
  Tensor<float> loss;
};

PretrainForward pretrain_forward(KmaeModel<float>& model,
                                 const SliceSample& sample,
                                 const TrainOptions& opt,
                                 uint64_t image_mask_seed) {
  PretrainForward out;
  const auto& cfg = model.config();
  if (cfg.input_domain == InputDomain::kspace) {
    TokenGridT<float> grid = model.tokenize_kspace(sample.k_masked, sample.mask);
    Tensor<float> enc = model.encode(grid);
    out.prediction = model.interpolation_decoder(enc);
    Tensor<float> target = series_to_stack<float>(sample.k_full);
    if (opt.loss_support == LossSupport::all)
      out.loss = mse_loss(out.prediction, target);
    else
      out.loss = weighted_mse_loss(out.prediction, target,
                                   missing_weight(sample.mask, cfg.grid.width));
  } else {
    std::vector<float> ref = reference_image(*sample.record, sample.slice);
    TokenGridT<float> grid =
        model.tokenize_image(ref, cfg.mask_ratio, image_mask_seed);
    Tensor<float> enc = model.encode_visible(grid);
    out.prediction = model.image_decoder(enc);
    Tensor<float> target = Tensor<float>::from(
        {cfg.grid.frames, cfg.grid.height, cfg.grid.width}, std::move(ref));
    if (opt.loss_support == LossSupport::all)
      out.loss = mse_loss(out.prediction, target);
    else
      out.loss = weighted_mse_loss(out.prediction, target,
                                   patch_missing_weight(grid, cfg));
  }
  return out;
}

// encoder output for a task input (k-space tokens, or full image patches)
Tensor<float> encode_sample(KmaeModel<float>& model, const SliceSample& sample) {
  const auto& cfg = model.config();
  if (cfg.input_domain == InputDomain::kspace) {
    TokenGridT<float> grid = model.tokenize_kspace(sample.k_masked, sample.mask);
    return model.encode(grid);
  }
  std::vector<float> ref = reference_image(*sample.record, sample.slice);
  TokenGridT<float> grid = model.tokenize_image(ref, 0.0, 0);
  return model.encode(grid);
}

Tensor<float> constant_copy(const Tensor<float>& t) {
  return Tensor<float>::from(t.shape(),
                             std::vector<float>(t.value().begin(), t.value().end()));
}

std::vector<float> mask_targets(const PhantomRecord& rec, int slice) {
  const size_t fsz = rec.frame_size();
  const size_t n = static_cast<size_t>(rec.params.frames) * fsz;
  const uint8_t* m = rec.mask_frame(slice, 0);
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(m[i]);
  return out;
}

Tensor<float> task_loss(KmaeModel<float>& model, Task task,
                        const Tensor<float>& encoded, const SliceSample& sample,
                        const TrainOptions& opt) {
  const auto& rec = *sample.record;
  const auto& g = model.config().grid;
  switch (task) {
    case Task::classify: {
      const int label = rec.class_label == ClassLabel::dysfunction ? 1 : 0;
      return cross_entropy_with_logits(model.classification_logits(encoded),
                                       {label});
    }
    case Task::regress_ef: {
      auto target = Tensor<float>::from({1}, {static_cast<float>(rec.ef_analog)});
      return huber_loss(model.regression_head(encoded), target,
                        static_cast<float>(opt.huber_delta));
    }
    case Task::regress_edv: {
      const float scaled =
          static_cast<float>(rec.edv_analog / (g.height * g.width));
      auto target = Tensor<float>::from({1}, {scaled});
      return huber_loss(model.regression_head(encoded), target,
                        static_cast<float>(opt.huber_delta));
    }
    case Task::segment: {
      Tensor<float> pred = model.interpolation_decoder(encoded);
      Tensor<float> logits = model.segmentation_logits(pred);
      auto target = Tensor<float>::from({g.frames, g.height, g.width},
                                        mask_targets(rec, sample.slice));
      return bce_with_logits(logits, target);
    }
    case Task::pretrain:
      throw ContractError("task_loss: pretrain has its own loss path");
  }
  throw ContractError("task_loss: unknown task");
}

std::vector<Tensor<float>> trainable_params(KmaeModel<float>& model, Task task,
                                            bool freeze_encoder) {
  std::vector<Tensor<float>> out;
  auto& ps = model.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names()[i];
    const bool enc = KmaeModel<float>::is_encoder_param(name);
    bool include = false;
    switch (task) {
      case Task::pretrain:
        include = true;
        break;
      case Task::classify:
        include = name.rfind("head.cls", 0) == 0 || (!freeze_encoder && enc);
        break;
      case Task::regress_ef:
      case Task::regress_edv:
        include = name.rfind("head.reg", 0) == 0 || (!freeze_encoder && enc);
        break;
      case Task::segment:
        include = KmaeModel<float>::is_decoder_param(name) ||
                  name.rfind("head.seg", 0) == 0 || (!freeze_encoder && enc);
        break;
    }
    if (include) out.push_back(ps.tensors()[i]);
  }
  return out;
}

double wall_seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

void check_finite_loss(const Tensor<float>& loss, int step, int subject,
                       int slice) {
  const float v = loss.value()[0];
  if (!std::isfinite(v))
    throw NumericError("non-finite loss " + std::to_string(v) + " at step " +
                       std::to_string(step) + " (subject " +
                       std::to_string(subject) + ", slice " +
                       std::to_string(slice) + ")");
}

// probabilities for one classification sample
std::vector<double> classify_probs(KmaeModel<float>& model,
                                   const Tensor<float>& encoded) {
  auto probs = model.classification_head(encoded);
  return {static_cast<double>(probs.value()[0]),
          static_cast<double>(probs.value()[1])};
}

}  // namespace

double augmented_r(double nominal_r, const TrainOptions& opt, int epoch) {
  if (!opt.r_augment_per_epoch || epoch < 0) return nominal_r;
  const double cycle[3] = {nominal_r, 1.0, 8.0};
  return cycle[epoch % 3];
}

std::string task_name(Task t) {
  switch (t) {
    case Task::pretrain: return "pretrain";
    case Task::regress_ef: return "regress_ef";
    case Task::regress_edv: return "regress_edv";
    case Task::classify: return "classify";
    case Task::segment: return "segment";
  }
  throw ContractError("task_name: unknown task");
}

Task task_from_name(const std::string& s) {
  if (s == "pretrain") return Task::pretrain;
  if (s == "regress_ef") return Task::regress_ef;
  if (s == "regress_edv") return Task::regress_edv;
  if (s == "classify") return Task::classify;
  if (s == "segment") return Task::segment;
  throw ConfigError("unknown task '" + s + "'");
}

std::string format_r(double r) {
  if (r == std::floor(r) && r < 1e6)
    return std::to_string(static_cast<long long>(r));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", r);
  return buf;
}

void Dataset::require_task_labels(Task t) const {
  if ((t == Task::classify || t == Task::segment) && !classification_mode())
    throw DataError("dataset was generated in regression mode and carries no " +
                    std::string(t == Task::classify ? "class" : "segmentation") +
                    " labels; task '" + task_name(t) + "' needs a "
                    "classification dataset");
}

Dataset dataset_from_cohort(Cohort cohort, const nlohmann::json& gen_config) {
  Dataset d;
  d.grid.height = cohort.records.at(0).params.grid_size;
  d.grid.width = d.grid.height;
  d.grid.frames = cohort.records.at(0).params.frames;
  d.grid.slices = cohort.records.at(0).params.slices;
  d.cohort = std::move(cohort);
  d.config_hash = json_digest(gen_config);
  return d;
}

void save_dataset(const std::string& path, const Dataset& data,
                  const nlohmann::json& gen_config) {
  const auto& recs = data.cohort.records;
  const int n = data.subjects();
  const size_t per_subject = recs.at(0).images.size();

  Container c;
  std::vector<float> images;
  images.reserve(per_subject * static_cast<size_t>(n));
  for (const auto& r : recs)
    images.insert(images.end(), r.images.begin(), r.images.end());
  const std::vector<long long> grid_shape = {
      n, data.grid.slices, data.grid.frames, data.grid.height, data.grid.width};
  c.add_f32("images", grid_shape, images);

  if (data.classification_mode()) {
    std::vector<uint8_t> masks;
    masks.reserve(per_subject * static_cast<size_t>(n));
    for (const auto& r : recs)
      masks.insert(masks.end(), r.myocardium_masks.begin(),
                   r.myocardium_masks.end());
    c.add_u8("myocardium_masks", grid_shape, masks);
    std::vector<uint8_t> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      labels[static_cast<size_t>(i)] =
          recs[static_cast<size_t>(i)].class_label == ClassLabel::dysfunction ? 1 : 0;
    c.add_u8("class_label", {n}, labels);
  }

  std::vector<double> ef(static_cast<size_t>(n)), edv(static_cast<size_t>(n));
  std::vector<double> params(static_cast<size_t>(n) * 9);
  std::vector<uint8_t> seeds(static_cast<size_t>(n) * 8);
  for (int i = 0; i < n; ++i) {
    const auto& p = recs[static_cast<size_t>(i)].params;
    ef[static_cast<size_t>(i)] = recs[static_cast<size_t>(i)].ef_analog;
    edv[static_cast<size_t>(i)] = recs[static_cast<size_t>(i)].edv_analog;
    double* row = params.data() + static_cast<size_t>(i) * 9;
    row[0] = p.base_cavity_radius;
    row[1] = p.contraction;
    row[2] = p.wall_area;
    row[3] = p.center_x;
    row[4] = p.center_y;
    row[5] = p.noise_std;
    row[6] = p.intensity_blood;
    row[7] = p.intensity_myo;
    row[8] = p.intensity_background;
    std::memcpy(seeds.data() + static_cast<size_t>(i) * 8, &p.seed, 8);
  }
  c.add_f64("ef", {n}, ef);
  c.add_f64("edv", {n}, edv);
  c.add_f64("subject_params", {n, 9}, params);
  c.add_u8("subject_seed", {n, 8}, seeds);
  c.add_u8("split", {n}, data.cohort.split);

  c.meta["kind"] = "dataset";
  c.meta["mode"] = data.classification_mode() ? "classify" : "regress";
  c.meta["grid"] = {{"height", data.grid.height},
                    {"width", data.grid.width},
                    {"frames", data.grid.frames},
                    {"slices", data.grid.slices}};
  c.meta["subjects"] = n;
  c.meta["seed"] = data.cohort.seed;
  c.meta["class_balance"] = data.cohort.class_balance;
  c.meta["tau"] = kDysfunctionTau;
  c.meta["gen_config"] = gen_config;
  c.meta["config_hash"] = json_digest(gen_config);
  write_container(path, c);
}

Dataset load_dataset(const std::string& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "dataset")
    throw DataError("not a dataset container: " + path);

  Dataset d;
  const auto& g = c.meta.at("grid");
  d.grid.height = g.at("height").get<int>();
  d.grid.width = g.at("width").get<int>();
  d.grid.frames = g.at("frames").get<int>();
  d.grid.slices = g.at("slices").get<int>();
  d.config_hash = c.meta.at("config_hash").get<std::string>();

  const int n = c.meta.at("subjects").get<int>();
  d.cohort.classification_mode = c.meta.at("mode").get<std::string>() == "classify";
  d.cohort.class_balance = c.meta.value("class_balance", 0.5);
  d.cohort.seed = c.meta.at("seed").get<uint64_t>();
  d.cohort.split = c.u8("split");

  auto images = c.f32("images");
  auto ef = c.f64("ef");
  auto edv = c.f64("edv");
  auto params = c.f64("subject_params");
  auto seeds = c.u8("subject_seed");
  std::vector<uint8_t> masks, labels;
  if (d.cohort.classification_mode) {
    masks = c.u8("myocardium_masks");
    labels = c.u8("class_label");
  }

  const size_t per_subject = static_cast<size_t>(d.grid.slices) * d.grid.frames *
                             d.grid.height * d.grid.width;
  d.cohort.records.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& rec = d.cohort.records[static_cast<size_t>(i)];
    PhantomParams& p = rec.params;
    p.grid_size = d.grid.height;
    p.frames = d.grid.frames;
    p.slices = d.grid.slices;
    const double* row = params.data() + static_cast<size_t>(i) * 9;
    p.base_cavity_radius = row[0];
    p.contraction = row[1];
    p.wall_area = row[2];
    p.center_x = row[3];
    p.center_y = row[4];
    p.noise_std = row[5];
    p.intensity_blood = row[6];
    p.intensity_myo = row[7];
    p.intensity_background = row[8];
    std::memcpy(&p.seed, seeds.data() + static_cast<size_t>(i) * 8, 8);
    rec.images.assign(images.begin() + static_cast<long>(i * per_subject),
                      images.begin() + static_cast<long>((i + 1) * per_subject));
    if (d.cohort.classification_mode) {
      rec.myocardium_masks.assign(
          masks.begin() + static_cast<long>(i * per_subject),
          masks.begin() + static_cast<long>((i + 1) * per_subject));
      rec.class_label = labels[static_cast<size_t>(i)] ? ClassLabel::dysfunction
                                                       : ClassLabel::normal;
    } else {
      rec.class_label = ef[static_cast<size_t>(i)] < kDysfunctionTau
                            ? ClassLabel::dysfunction
                            : ClassLabel::normal;
    }
    rec.ef_analog = ef[static_cast<size_t>(i)];
    rec.edv_analog = edv[static_cast<size_t>(i)];
  }
  return d;
}

SliceSample build_slice_sample(const PhantomRecord& rec, uint64_t acq_seed,
                               int subject, int slice, double r,
                               const TrainOptions& opt, bool eval_masks,
                               int resample_tag) {
  const auto& p = rec.params;
  SliceSample s;
  s.record = &rec;
  s.subject = subject;
  s.slice = slice;

  auto img = ComplexSeries::make(Domain::image, p.frames, p.grid_size,
                                 p.grid_size);
  const float* frames = rec.image_frame(slice, 0);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = {frames[i], 0.0f};

  const uint64_t b0_seed = mix_seed(
      acq_seed, kB0Salt,
      (opt.b0_resample_per_epoch && resample_tag >= 0) ? 1 + resample_tag : 0);
  auto field = make_b0_field<float>(
      p.grid_size, p.grid_size, opt.b0_sigma_frac * p.grid_size,
      opt.b0_amplitude, b0_seed);
  s.k_full = fft2_centered(apply_b0_phase(img, field));

  const int acs = opt.acs_count > 0 ? opt.acs_count
                                    : default_acs_count(p.grid_size, r);
  uint64_t mask_seed =
      mix_seed(acq_seed, r_bits(r), eval_masks ? kEvalMaskSalt : kTrainMaskSalt);
  if (opt.mask_resample_per_epoch && !eval_masks && resample_tag >= 0)
    mask_seed = mix_seed(mask_seed, 0x3E5A, static_cast<uint64_t>(resample_tag));
  s.mask = make_mask(p.grid_size, p.frames, r, acs, mask_seed);
  s.k_masked = apply_mask(s.k_full, s.mask);
  return s;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["split"] = split;
  j["per_r"] = per_r;
  j["meta"] = meta;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.task = j.at("task").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.per_r = j.at("per_r")
                .get<std::map<std::string, std::map<std::string, double>>>();
  r.meta = j.at("meta");
  return r;
}

double dice_score(std::span<const float> prob, std::span<const uint8_t> truth,
                  size_t n, float threshold) {
  size_t inter = 0, p_count = 0, t_count = 0;
  for (size_t i = 0; i < n; ++i) {
    const bool p = prob[i] >= threshold;
    const bool t = truth[i] != 0;
    inter += p && t;
    p_count += p;
    t_count += t;
  }
  if (p_count + t_count == 0) return 1.0;  // empty/empty convention
  return 2.0 * static_cast<double>(inter) /
         static_cast<double>(p_count + t_count);
}

double mean_baseline_mae(const Dataset& data, int split, Task task) {
  if (task != Task::regress_ef && task != Task::regress_edv)
    throw ContractError("mean_baseline_mae: regression tasks only");
  auto target = [&](int i) {
    const auto& r = data.cohort.records[static_cast<size_t>(i)];
    return task == Task::regress_ef ? r.ef_analog : r.edv_analog;
  };
  double mean = 0;
  int n_train = 0;
  for (int i : data.cohort.indices_of_split(0)) {
    mean += target(i);
    ++n_train;
  }
  mean /= std::max(1, n_train);
  double mae = 0;
  int n = 0;
  for (int i : data.cohort.indices_of_split(split)) {
    mae += std::abs(target(i) - mean);
    ++n;
  }
  if (n == 0) throw DataError("mean_baseline_mae: empty split");
  return mae / n;
}

double zero_filled_psnr(const Dataset& data, int split, double r,
                        const TrainOptions& opt, uint64_t eval_seed) {
  auto samples = split_samples(data, split);
  if (samples.empty()) throw DataError("zero_filled_psnr: empty split");
  TrainOptions o = opt;
  (void)eval_seed;
  double acc = 0;
  for (const auto& sr : samples) {
    const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
    auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                     sr.slice, r, o, true);
    auto mag = zero_fill_reconstruct(sample.k_masked, sample.mask);
    auto ref = reference_image(rec, sr.slice);
    acc += psnr(ref, mag);
  }
  return acc / static_cast<double>(samples.size());
}

TrainResult pretrain(KmaeModel<float>& model, const Dataset& data,
                     const TaskSpec& spec, const TrainOptions& opt) {
  spec.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto train = split_samples(data, 0);
  auto val = split_samples(data, 1);
  if (train.empty() || val.empty())
    throw DataError("pretrain: cohort needs non-empty train and val splits");
  if (data.grid.height != model.config().grid.height ||
      data.grid.width != model.config().grid.width ||
      data.grid.frames != model.config().grid.frames)
    throw ConfigError("pretrain: model grid does not match dataset grid");

  const long long total_steps =
      static_cast<long long>(spec.epochs) * static_cast<long long>(train.size());
  ScheduleConfig sched;
  sched.total_steps = std::max<long long>(2, total_steps);
  sched.warmup_steps = std::max<long long>(
      1, static_cast<long long>(opt.warmup_frac * sched.total_steps));
  sched.lr_peak = opt.lr_peak;

  Adam<float> optim(trainable_params(model, Task::pretrain, false));
  TrainResult result;
  double best_val = -1e18;
  auto best_params = snapshot_values(model.params());
  long long step = 0;

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto order = train;
    Rng shuffle_rng(mix_seed(spec.seed, 0xE90C4 + epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    for (const auto& sr : order) {
      const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
      auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                       sr.slice, spec.input_r, opt, false,
                                       epoch);
      const uint64_t img_seed = mix_seed(spec.seed, sr.subject * 1000 + sr.slice,
                                         epoch);
      auto fwd = pretrain_forward(model, sample, opt, img_seed);
      check_finite_loss(fwd.loss, static_cast<int>(step), sr.subject, sr.slice);
      optim.zero_grad();
      backward(fwd.loss);
      optim.step(static_cast<float>(lr_at_step(step + 1, sched)));
      epoch_loss += fwd.loss.value()[0];
      result.step_losses.push_back(fwd.loss.value()[0]);
      ++step;
    }
    epoch_loss /= static_cast<double>(order.size());

    // validation PSNR with data consistency
    double val_psnr = 0;
    for (const auto& sr : val) {
      const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
      auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                       sr.slice, spec.input_r, opt, true);
      auto fwd = pretrain_forward(model, sample, opt,
                                  mix_seed(spec.seed, 0x7A1, sr.subject));
      std::vector<float> mag;
      if (model.config().input_domain == InputDomain::kspace) {
        auto pred = stack_to_series<float>(fwd.prediction, Domain::kspace);
        auto recon = ifft2_centered(
            data_consistency(pred, sample.k_masked, sample.mask));
        mag.resize(recon.data.size());
        for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(recon.data[i]);
      } else {
        mag.assign(fwd.prediction.value().begin(), fwd.prediction.value().end());
      }
      val_psnr += psnr(reference_image(rec, sr.slice), mag);
    }
    val_psnr /= static_cast<double>(val.size());
    result.epoch_curve.emplace_back(epoch_loss, val_psnr);
    if (val_psnr > best_val) {
      best_val = val_psnr;
      best_params = snapshot_values(model.params());
    }
  }
  restore_values(model.params(), best_params);

  result.report.task = task_name(Task::pretrain);
  result.report.split = "val";
  result.report.per_r[format_r(spec.input_r)] = {{"psnr_mean", best_val}};
  result.report.meta["seed"] = spec.seed;
  result.report.meta["steps"] = step;
  result.report.meta["epochs"] = spec.epochs;
  result.report.meta["wall_time_s"] = wall_seconds_since(t0);
  result.report.meta["data_config_hash"] = data.config_hash;
  return result;
}

TrainResult finetune(KmaeModel<float>& model, const Dataset& data,
                     const TaskSpec& spec, const TrainOptions& opt) {
  spec.validate();
  if (spec.task == Task::pretrain)
    throw ConfigError("finetune: task must be a downstream task");
  data.require_task_labels(spec.task);
  if (data.grid.height != model.config().grid.height ||
      data.grid.frames != model.config().grid.frames)
    throw ConfigError("finetune: model grid does not match dataset grid");
  const auto t0 = std::chrono::steady_clock::now();

  auto train = split_samples(data, 0);
  if (train.empty()) throw DataError("finetune: empty train split");

  // frozen encoders over static inputs: cache encoder outputs once
  const bool cache_encoder = spec.freeze_encoder && !opt.b0_resample_per_epoch &&
                             !opt.mask_resample_per_epoch &&
                             !opt.r_augment_per_epoch;
  if (spec.freeze_encoder)
    for (size_t i = 0; i < model.params().size(); ++i)
      if (KmaeModel<float>::is_encoder_param(model.params().names()[i]))
        model.params().tensors()[i].set_requires_grad(false);

  std::vector<Tensor<float>> cache;
  if (cache_encoder) {
    cache.reserve(train.size());
    for (const auto& sr : train) {
      const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
      auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                       sr.slice, spec.input_r, opt, false);
      cache.push_back(constant_copy(encode_sample(model, sample)));
    }
  }

  const long long total_steps =
      static_cast<long long>(spec.epochs) * static_cast<long long>(train.size());
  ScheduleConfig sched;
  sched.total_steps = std::max<long long>(2, total_steps);
  sched.warmup_steps = std::max<long long>(
      1, static_cast<long long>(opt.warmup_frac * sched.total_steps));
  sched.lr_peak = opt.lr_peak;

  Adam<float> optim(trainable_params(model, spec.task, spec.freeze_encoder));
  TrainResult result;
  long long step = 0;

  std::vector<int> order_idx(train.size());
  for (size_t i = 0; i < train.size(); ++i) order_idx[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto order = order_idx;
    Rng shuffle_rng(mix_seed(spec.seed, 0xF17E + epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    for (int oi : order) {
      const auto& sr = train[static_cast<size_t>(oi)];
      const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
      auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                       sr.slice,
                                       augmented_r(spec.input_r, opt, epoch),
                                       opt, false, epoch);
      Tensor<float> enc = cache_encoder ? cache[static_cast<size_t>(oi)]
                                        : encode_sample(model, sample);
      Tensor<float> loss = task_loss(model, spec.task, enc, sample, opt);
      check_finite_loss(loss, static_cast<int>(step), sr.subject, sr.slice);
      optim.zero_grad();
      backward(loss);
      optim.step(static_cast<float>(lr_at_step(step + 1, sched)));
      epoch_loss += loss.value()[0];
      result.step_losses.push_back(loss.value()[0]);
      ++step;
    }
    result.epoch_curve.emplace_back(epoch_loss / train.size(), 0.0);
  }

  if (spec.freeze_encoder)
    for (auto& p : model.params().tensors()) p.set_requires_grad(true);

  result.report.task = task_name(spec.task);
  result.report.split = "train";
  result.report.per_r[format_r(spec.input_r)] = {
      {"final_loss", result.epoch_curve.back().first}};
  result.report.meta["seed"] = spec.seed;
  result.report.meta["steps"] = step;
  result.report.meta["freeze_encoder"] = spec.freeze_encoder;
  result.report.meta["wall_time_s"] = wall_seconds_since(t0);
  result.report.meta["data_config_hash"] = data.config_hash;
  return result;
}

namespace {

struct EvalBuffers {
  std::vector<float> probs;         // [M,2]
  std::vector<double> preds;        // [M]
  std::vector<float> seg_probs;     // [M,S,T,H,W]
  std::vector<std::complex<float>> pred_k;  // [M,S,T,H,W]
  std::vector<float> recon;         // [M,S,T,H,W]
  std::vector<double> psnr_vals;    // [M*S]
};

}  // namespace

MetricsReport evaluate(KmaeModel<float>& model, Task task, const Dataset& data,
                       int split, const std::vector<double>& r_list,
                       const TrainOptions& opt, uint64_t eval_seed,
                       Container* predictions) {
  data.require_task_labels(task);
  auto subjects = data.cohort.indices_of_split(split);
  if (subjects.empty()) throw DataError("evaluate: empty split " + split_name(split));
  const auto t0 = std::chrono::steady_clock::now();
  const auto& g = data.grid;
  const int m = static_cast<int>(subjects.size());
  const size_t vol = static_cast<size_t>(g.slices) * g.frames * g.height * g.width;

  MetricsReport report;
  report.task = task_name(task);
  report.split = split_name(split);

  if (predictions) {
    std::vector<double> ids(subjects.begin(), subjects.end());
    predictions->add_f64("subject_index", {m}, ids);
    if (task == Task::classify) {
      std::vector<uint8_t> labels(static_cast<size_t>(m));
      for (int i = 0; i < m; ++i)
        labels[static_cast<size_t>(i)] =
            data.cohort.records[static_cast<size_t>(subjects[static_cast<size_t>(i)])]
                        .class_label == ClassLabel::dysfunction
                ? 1
                : 0;
      predictions->add_u8("label", {m}, labels);
    }
    if (task == Task::regress_ef || task == Task::regress_edv) {
      std::vector<double> truth(static_cast<size_t>(m));
      for (int i = 0; i < m; ++i) {
        const auto& rec =
            data.cohort.records[static_cast<size_t>(subjects[static_cast<size_t>(i)])];
        truth[static_cast<size_t>(i)] =
            task == Task::regress_ef ? rec.ef_analog : rec.edv_analog;
      }
      predictions->add_f64("truth", {m}, truth);
    }
  }

  TrainOptions o = opt;
  (void)eval_seed;
  for (double r : r_list) {
    EvalBuffers buf;
    double accuracy = 0, mae = 0, dice_sum = 0, psnr_sum = 0;
    long long dice_n = 0;

    for (int mi = 0; mi < m; ++mi) {
      const int subject = subjects[static_cast<size_t>(mi)];
      const auto& rec = data.cohort.records[static_cast<size_t>(subject)];
      std::vector<std::vector<double>> slice_probs;
      std::vector<double> slice_scalars;

      for (int s = 0; s < g.slices; ++s) {
        auto sample =
            build_slice_sample(rec, data.cohort.seed, subject, s, r, o, true);
        switch (task) {
          case Task::classify: {
            auto enc = encode_sample(model, sample);
            slice_probs.push_back(classify_probs(model, enc));
            break;
          }
          case Task::regress_ef:
          case Task::regress_edv: {
            auto enc = encode_sample(model, sample);
            double v = model.regression_head(enc).value()[0];
            if (task == Task::regress_edv) v *= g.height * g.width;
            slice_scalars.push_back(v);
            break;
          }
          case Task::segment: {
            auto enc = encode_sample(model, sample);
            auto pred = model.interpolation_decoder(enc);
            auto pred_series = stack_to_series<float>(pred, Domain::kspace);
            auto consistent =
                data_consistency(pred_series, sample.k_masked, sample.mask);
            auto probs = model.segmentation_head(
                series_to_stack<float>(consistent));
            const size_t fsz = static_cast<size_t>(g.height) * g.width;
            for (int t = 0; t < g.frames; ++t) {
              dice_sum += dice_score(
                  std::span(probs.value().data() + t * fsz, fsz),
                  std::span(rec.mask_frame(s, t), fsz), fsz);
              ++dice_n;
            }
            buf.seg_probs.insert(buf.seg_probs.end(), probs.value().begin(),
                                 probs.value().end());
            buf.pred_k.insert(buf.pred_k.end(), consistent.data.begin(),
                              consistent.data.end());
            break;
          }
          case Task::pretrain: {
            auto fwd = pretrain_forward(model, sample, o,
                                        mix_seed(0x7A1, subject, s));
            std::vector<float> mag;
            if (model.config().input_domain == InputDomain::kspace) {
              auto pred = stack_to_series<float>(fwd.prediction, Domain::kspace);
              auto recon = ifft2_centered(
                  data_consistency(pred, sample.k_masked, sample.mask));
              mag.resize(recon.data.size());
              for (size_t i = 0; i < mag.size(); ++i)
                mag[i] = std::abs(recon.data[i]);
            } else {
              mag.assign(fwd.prediction.value().begin(),
                         fwd.prediction.value().end());
            }
            const double p = psnr(reference_image(rec, s), mag);
            psnr_sum += p;
            buf.psnr_vals.push_back(p);
            buf.recon.insert(buf.recon.end(), mag.begin(), mag.end());
            break;
          }
        }
      }

      if (task == Task::classify) {
        auto agg = multi_slice_aggregate_probs(slice_probs);
        const int pred = agg[1] > agg[0] ? 1 : 0;
        const int truth = rec.class_label == ClassLabel::dysfunction ? 1 : 0;
        accuracy += pred == truth;
        buf.probs.push_back(static_cast<float>(agg[0]));
        buf.probs.push_back(static_cast<float>(agg[1]));
      } else if (task == Task::regress_ef || task == Task::regress_edv) {
        const double pred = multi_slice_aggregate(slice_scalars);
        const double truth =
            task == Task::regress_ef ? rec.ef_analog : rec.edv_analog;
        mae += std::abs(pred - truth);
        buf.preds.push_back(pred);
      }
    }

    std::map<std::string, double> metrics;
    const std::string rkey = format_r(r);
    switch (task) {
      case Task::classify:
        metrics["accuracy"] = accuracy / m;
        break;
      case Task::regress_ef:
      case Task::regress_edv:
        metrics["mae"] = mae / m;
        break;
      case Task::segment:
        metrics["dice_mean"] = dice_sum / static_cast<double>(dice_n);
        break;
      case Task::pretrain:
        metrics["psnr_mean"] = psnr_sum / (static_cast<double>(m) * g.slices);
        break;
    }
    report.per_r[rkey] = metrics;

    if (predictions) {
      const std::vector<long long> volume_shape = {m, g.slices, g.frames,
                                                   g.height, g.width};
      if (task == Task::classify)
        predictions->add_f32("r" + rkey + ".prob", {m, 2}, buf.probs);
      if (task == Task::regress_ef || task == Task::regress_edv)
        predictions->add_f64("r" + rkey + ".pred", {m}, buf.preds);
      if (task == Task::segment) {
        predictions->add_f32("r" + rkey + ".seg_prob", volume_shape,
                             buf.seg_probs);
        predictions->add_c64("r" + rkey + ".pred_k", volume_shape, buf.pred_k);
      }
      if (task == Task::pretrain) {
        predictions->add_f32("r" + rkey + ".recon", volume_shape, buf.recon);
        predictions->add_f64("r" + rkey + ".psnr",
                             {m, g.slices}, buf.psnr_vals);
      }
    }
  }

  report.meta["eval_seed"] = eval_seed;
  report.meta["wall_time_s"] = wall_seconds_since(t0);
  report.meta["data_config_hash"] = data.config_hash;
  if (predictions) {
    predictions->meta["kind"] = "predictions";
    predictions->meta["task"] = report.task;
    predictions->meta["split"] = report.split;
    predictions->meta["data_config_hash"] = data.config_hash;
  }
  return report;
}

MetricsReport robustness_sweep(KmaeModel<float>& model, Task task,
                               const Dataset& data, int split,
                               const TrainOptions& opt, uint64_t eval_seed) {
  MetricsReport r =
      evaluate(model, task, data, split, {1.0, 4.0, 8.0}, opt, eval_seed, nullptr);
  nlohmann::json deltas;
  const auto& base = r.per_r.at("1");
  for (const auto& [rkey, metrics] : r.per_r) {
    nlohmann::json d;
    for (const auto& [name, value] : metrics)
      d[name] = value - base.at(name);
    deltas[rkey] = d;
  }
  r.meta["deltas_vs_r1"] = deltas;
  return r;
}

namespace {

Tensor<float> cnn_input(const SliceSample& sample) {
  const auto& k = sample.k_masked;
  std::vector<float> v(static_cast<size_t>(2) * k.frames * k.height * k.width);
  const size_t fsz = k.frame_size();
  for (int t = 0; t < k.frames; ++t)
    for (size_t i = 0; i < fsz; ++i) {
      v[(static_cast<size_t>(2 * t)) * fsz + i] = k.data[t * fsz + i].real();
      v[(static_cast<size_t>(2 * t + 1)) * fsz + i] = k.data[t * fsz + i].imag();
    }
  return Tensor<float>::from({2 * k.frames, k.height, k.width}, std::move(v));
}

Tensor<float> cnn_loss(CnnBaseline<float>& model, Task task,
                       const Tensor<float>& input, const PhantomRecord& rec,
                       const GridDims& g, const TrainOptions& opt) {
  switch (task) {
    case Task::classify: {
      const int label = rec.class_label == ClassLabel::dysfunction ? 1 : 0;
      return cross_entropy_with_logits(model.classification_logits(input),
                                       {label});
    }
    case Task::regress_ef:
      return huber_loss(model.regression_head(input),
                        Tensor<float>::from({1}, {static_cast<float>(rec.ef_analog)}),
                        static_cast<float>(opt.huber_delta));
    case Task::regress_edv:
      return huber_loss(
          model.regression_head(input),
          Tensor<float>::from(
              {1}, {static_cast<float>(rec.edv_analog / (g.height * g.width))}),
          static_cast<float>(opt.huber_delta));
    default:
      throw ConfigError("cnn baseline: classify and regression tasks only");
  }
}

}  // namespace

TrainResult cnn_train(CnnBaseline<float>& model, const Dataset& data,
                      const TaskSpec& spec, const TrainOptions& opt) {
  spec.validate();
  data.require_task_labels(spec.task);
  const auto t0 = std::chrono::steady_clock::now();
  auto train = split_samples(data, 0);
  if (train.empty()) throw DataError("cnn_train: empty train split");

  const long long total_steps =
      static_cast<long long>(spec.epochs) * static_cast<long long>(train.size());
  ScheduleConfig sched;
  sched.total_steps = std::max<long long>(2, total_steps);
  sched.warmup_steps = std::max<long long>(
      1, static_cast<long long>(opt.warmup_frac * sched.total_steps));
  sched.lr_peak = opt.lr_peak;

  std::vector<Tensor<float>> params = model.params().tensors();
  Adam<float> optim(params);
  TrainResult result;
  long long step = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto order = train;
    Rng shuffle_rng(mix_seed(spec.seed, 0xC4A + epoch));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    for (const auto& sr : order) {
      const auto& rec = data.cohort.records[static_cast<size_t>(sr.subject)];
      auto sample = build_slice_sample(rec, data.cohort.seed, sr.subject,
                                       sr.slice,
                                       augmented_r(spec.input_r, opt, epoch),
                                       opt, false, epoch);
      auto loss = cnn_loss(model, spec.task, cnn_input(sample), rec, data.grid, opt);
      check_finite_loss(loss, static_cast<int>(step), sr.subject, sr.slice);
      optim.zero_grad();
      backward(loss);
      optim.step(static_cast<float>(lr_at_step(step + 1, sched)));
      epoch_loss += loss.value()[0];
      result.step_losses.push_back(loss.value()[0]);
      ++step;
    }
    result.epoch_curve.emplace_back(epoch_loss / train.size(), 0.0);
  }
  result.report.task = task_name(spec.task);
  result.report.split = "train";
  result.report.per_r[format_r(spec.input_r)] = {
      {"final_loss", result.epoch_curve.back().first}};
  result.report.meta["arch"] = "cnn";
  result.report.meta["seed"] = spec.seed;
  result.report.meta["steps"] = step;
  result.report.meta["wall_time_s"] = wall_seconds_since(t0);
  result.report.meta["data_config_hash"] = data.config_hash;
  return result;
}

MetricsReport cnn_evaluate(CnnBaseline<float>& model, Task task,
                           const Dataset& data, int split,
                           const std::vector<double>& r_list,
                           const TrainOptions& opt, uint64_t eval_seed,
                           Container* predictions) {
  data.require_task_labels(task);
  if (task != Task::classify && task != Task::regress_ef &&
      task != Task::regress_edv)
    throw ConfigError("cnn baseline: classify and regression tasks only");
  auto subjects = data.cohort.indices_of_split(split);
  if (subjects.empty()) throw DataError("cnn_evaluate: empty split");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& g = data.grid;
  const int m = static_cast<int>(subjects.size());

  MetricsReport report;
  report.task = task_name(task);
  report.split = split_name(split);
  report.meta["arch"] = "cnn";

  if (predictions) {
    std::vector<double> ids(subjects.begin(), subjects.end());
    predictions->add_f64("subject_index", {m}, ids);
    predictions->meta["kind"] = "predictions";
    predictions->meta["task"] = report.task;
    predictions->meta["arch"] = "cnn";
  }

  for (double r : r_list) {
    double accuracy = 0, mae = 0;
    std::vector<float> probs;
    std::vector<double> preds;
    for (int mi = 0; mi < m; ++mi) {
      const int subject = subjects[static_cast<size_t>(mi)];
      const auto& rec = data.cohort.records[static_cast<size_t>(subject)];
      std::vector<std::vector<double>> slice_probs;
      std::vector<double> slice_scalars;
      for (int s = 0; s < g.slices; ++s) {
        auto sample =
            build_slice_sample(rec, data.cohort.seed, subject, s, r, opt, true);
        auto input = cnn_input(sample);
        if (task == Task::classify) {
          auto sm = softmax_rows(model.classification_logits(input));
          slice_probs.push_back({static_cast<double>(sm.value()[0]),
                                 static_cast<double>(sm.value()[1])});
        } else {
          double v = model.regression_head(input).value()[0];
          if (task == Task::regress_edv) v *= g.height * g.width;
          slice_scalars.push_back(v);
        }
      }
      if (task == Task::classify) {
        auto agg = multi_slice_aggregate_probs(slice_probs);
        const int pred = agg[1] > agg[0] ? 1 : 0;
        const int truth = rec.class_label == ClassLabel::dysfunction ? 1 : 0;
        accuracy += pred == truth;
        probs.push_back(static_cast<float>(agg[0]));
        probs.push_back(static_cast<float>(agg[1]));
      } else {
        const double pred = multi_slice_aggregate(slice_scalars);
        const double truth =
            task == Task::regress_ef ? rec.ef_analog : rec.edv_analog;
        mae += std::abs(pred - truth);
        preds.push_back(pred);
      }
    }
    const std::string rkey = format_r(r);
    if (task == Task::classify) {
      report.per_r[rkey] = {{"accuracy", accuracy / m}};
      if (predictions)
        predictions->add_f32("r" + rkey + ".prob", {m, 2}, probs);
    } else {
      report.per_r[rkey] = {{"mae", mae / m}};
      if (predictions)
        predictions->add_f64("r" + rkey + ".pred", {m}, preds);
    }
  }
  report.meta["eval_seed"] = eval_seed;
  report.meta["wall_time_s"] = wall_seconds_since(t0);
  report.meta["data_config_hash"] = data.config_hash;
  return report;
}

}  // namespace kmae
