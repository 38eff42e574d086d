// SPDX-License-Identifier: Apache-2.0
#include "kmae/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kmae/config.hpp"
#include "kmae/container.hpp"
#include "kmae/model.hpp"
#include "kmae/train_eval.hpp"

namespace kmae::cli {

namespace {

namespace fs = std::filesystem;

void write_text_atomic(const std::string& path, const std::string& content) {
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp.string());
    f << content;
    if (!f) {
      f.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("rename failed for " + target.string() + ": " + ec.message());
  }
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return RunConfig::load(path);
}

std::vector<double> parse_r_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    size_t pos = 0;
    const double r = std::stod(item, &pos);
    if (pos != item.size() || r < 1.0)
      throw ConfigError("invalid acceleration list entry '" + item + "'");
    out.push_back(r);
  }
  if (out.empty()) throw ConfigError("empty acceleration list");
  return out;
}

int split_from_name(const std::string& s) {
  if (s == "train") return 0;
  if (s == "val") return 1;
  if (s == "test") return 2;
  throw ConfigError("unknown split '" + s + "' (train|val|test)");
}

std::string loss_curve_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_metric\n";
  for (size_t i = 0; i < r.epoch_curve.size(); ++i)
    os << i << "," << r.epoch_curve[i].first << "," << r.epoch_curve[i].second
       << "\n";
  return os.str();
}

nlohmann::json grid_json(const GridDims& g) {
  return {{"height", g.height},
          {"width", g.width},
          {"frames", g.frames},
          {"slices", g.slices}};
}

GridDims grid_from_json(const nlohmann::json& j) {
  GridDims g;
  g.height = j.at("height").get<int>();
  g.width = j.at("width").get<int>();
  g.frames = j.at("frames").get<int>();
  g.slices = j.at("slices").get<int>();
  return g;
}

void require_grid_match(const GridDims& a, const GridDims& b,
                        const std::string& what) {
  if (!(a == b))
    throw ConfigError(what + ": grid mismatch (" + std::to_string(a.height) +
                      "x" + std::to_string(a.width) + "x" +
                      std::to_string(a.frames) + "x" + std::to_string(a.slices) +
                      " vs " + std::to_string(b.height) + "x" +
                      std::to_string(b.width) + "x" + std::to_string(b.frames) +
                      "x" + std::to_string(b.slices) + ")");
}

}  // namespace

int cmd_gen(const GenArgs& a) {
  return guarded([&] {
    RunConfig cfg = load_config_or_default(a.config_path);
    PhantomParams base = cfg.phantom;
    base.grid_size = a.size;
    base.frames = a.frames;
    base.slices = a.slices;
    base.center_x = a.size / 2.0;
    base.center_y = a.size / 2.0;
    base.validate();

    const bool regression = [&] {
      if (a.mode == "classify") return false;
      if (a.mode == "regress") return true;
      throw ConfigError("unknown mode '" + a.mode + "' (classify|regress)");
    }();

    Cohort cohort =
        make_cohort(a.subjects, a.class_balance, regression, a.seed, base);

    nlohmann::json gen_config;
    gen_config["subjects"] = a.subjects;
    gen_config["mode"] = a.mode;
    gen_config["class_balance"] = a.class_balance;
    gen_config["seed"] = a.seed;
    gen_config["phantom"] = cfg.to_json().at("phantom");
    gen_config["phantom"]["grid_size"] = a.size;
    gen_config["phantom"]["frames"] = a.frames;
    gen_config["phantom"]["slices"] = a.slices;

    Dataset data = dataset_from_cohort(std::move(cohort), gen_config);
    save_dataset(a.out, data, gen_config);

    int n_normal = 0, n_dys = 0;
    for (const auto& r : data.cohort.records)
      (r.class_label == ClassLabel::normal ? n_normal : n_dys) += 1;
    std::cout << "wrote " << a.out << ": " << a.subjects << " subjects ("
              << (regression ? "regression" : "classification") << " mode";
    if (!regression) std::cout << ", " << n_normal << "/" << n_dys << " labels";
    std::cout << "), grid " << a.size << "x" << a.size << "x" << a.frames << "x"
              << a.slices << ", config hash " << data.config_hash << "\n";
    return 0;
  });
}

int cmd_masks(const MasksArgs& a) {
  return guarded([&] {
    const int acs = a.acs_count > 0
                        ? a.acs_count
                        : default_acs_count(a.num_lines, a.acceleration);
    SamplingMask mask =
        make_mask(a.num_lines, a.frames, a.acceleration, acs, a.seed);
    MaskStats stats = mask_stats(mask);

    Container c;
    c.add_u8("lines", {a.frames, a.num_lines}, mask.lines);
    c.meta["kind"] = "mask";
    c.meta["num_lines"] = a.num_lines;
    c.meta["frames"] = a.frames;
    c.meta["acceleration"] = a.acceleration;
    c.meta["acs_count"] = acs;
    c.meta["seed"] = a.seed;
    write_container(a.out, c);

    // binary P5 portable graymap, T rows x H columns, 255 = sampled
    std::ostringstream pgm;
    pgm << "P5\n" << a.num_lines << " " << a.frames << "\n255\n";
    for (uint8_t v : mask.lines) pgm << static_cast<char>(v ? 255 : 0);
    const std::string pgm_path =
        fs::path(a.out).replace_extension(".pgm").string();
    write_text_atomic(pgm_path, pgm.str());

    std::cout << "wrote " << a.out << " and " << pgm_path << ": H="
              << a.num_lines << " T=" << a.frames << " R=" << a.acceleration
              << " acs=" << acs << " achieved_R=" << stats.achieved_r
              << " union_coverage=" << stats.union_coverage << "\n";
    return 0;
  });
}

int cmd_pretrain(const PretrainArgs& a) {
  return guarded([&] {
    Dataset data = load_dataset(a.data);
    RunConfig cfg = load_config_or_default(a.config_path);
    require_grid_match(cfg.model.grid, data.grid, "pretrain config vs dataset");

    TaskSpec spec = cfg.task;
    spec.task = Task::pretrain;
    spec.input_r = cfg.mask.acceleration;
    if (a.epochs > 0) spec.epochs = a.epochs;
    if (a.seed >= 0) spec.seed = static_cast<uint64_t>(a.seed);
    TrainOptions opt = cfg.train;
    opt.acs_count = cfg.mask.acs_count;

    KmaeModel<float> model(cfg.model, spec.seed);
    TrainResult result = pretrain(model, data, spec, opt);

    nlohmann::json meta;
    meta["arch"] = "kmae";
    meta["task"] = task_name(Task::pretrain);
    meta["model_config"] = model.config().to_json();
    meta["grid"] = grid_json(data.grid);
    meta["step"] = result.report.meta.at("steps");
    meta["input_r"] = spec.input_r;
    meta["seed"] = spec.seed;
    meta["config_hash"] = cfg.config_hash();
    meta["data_config_hash"] = data.config_hash;
    save_checkpoint(a.out_ckpt, model.params(), meta);

    result.report.meta["config_hash"] = cfg.config_hash();
    write_text_atomic(a.out_ckpt + ".report.json",
                      result.report.to_json().dump(2) + "\n");
    write_text_atomic(a.out_ckpt + ".loss.csv", loss_curve_csv(result));

    std::cout << "pretrain done: best val psnr "
              << result.report.per_r.begin()->second.at("psnr_mean") << " dB, "
              << result.report.meta.at("steps") << " steps, checkpoint "
              << a.out_ckpt << "\n";
    return 0;
  });
}

int cmd_finetune(const FinetuneArgs& a) {
  return guarded([&] {
    Dataset data = load_dataset(a.data);
    RunConfig cfg = load_config_or_default(a.config_path);
    const Task task = task_from_name(a.task);

    TaskSpec spec = cfg.task;
    spec.task = task;
    spec.input_r = a.acceleration;
    spec.freeze_encoder = a.freeze_encoder;
    if (a.epochs > 0) spec.epochs = a.epochs;
    if (a.seed >= 0) spec.seed = static_cast<uint64_t>(a.seed);
    TrainOptions opt = cfg.train;
    opt.acs_count = cfg.mask.acs_count;

    nlohmann::json meta;
    TrainResult result;
    if (a.arch == "cnn") {
      CnnConfig ccfg;
      ccfg.grid = data.grid;
      CnnBaseline<float> model(ccfg, spec.seed);
      result = cnn_train(model, data, spec, opt);
      meta["arch"] = "cnn";
      meta["cnn_config"] = ccfg.to_json();
      meta["task"] = task_name(task);
      meta["grid"] = grid_json(data.grid);
      meta["step"] = result.report.meta.at("steps");
      meta["input_r"] = spec.input_r;
      meta["seed"] = spec.seed;
      meta["freeze_encoder"] = false;
      meta["config_hash"] = cfg.config_hash();
      meta["data_config_hash"] = data.config_hash;
      save_checkpoint(a.out_ckpt, model.params(), meta);
    } else if (a.arch == "kmae") {
      if (a.ckpt.empty())
        throw ConfigError("finetune: --ckpt is required for the kmae arch");
      CheckpointData ckpt = load_checkpoint(a.ckpt);
      if (ckpt.meta.value("arch", "kmae") != "kmae")
        throw ConfigError("finetune: checkpoint arch is not kmae");
      require_grid_match(grid_from_json(ckpt.meta.at("grid")), data.grid,
                         "finetune checkpoint vs dataset");
      ModelConfig mcfg = ModelConfig::from_json(ckpt.meta.at("model_config"));
      KmaeModel<float> model(mcfg, spec.seed);
      restore_params(model.params(), ckpt);
      result = finetune(model, data, spec, opt);
      meta = ckpt.meta;
      meta["task"] = task_name(task);
      meta["step"] = result.report.meta.at("steps");
      meta["input_r"] = spec.input_r;
      meta["seed"] = spec.seed;
      meta["freeze_encoder"] = spec.freeze_encoder;
      meta["pretrain_checkpoint"] = a.ckpt;
      meta["config_hash"] = cfg.config_hash();
      meta["data_config_hash"] = data.config_hash;
      save_checkpoint(a.out_ckpt, model.params(), meta);
    } else {
      throw ConfigError("unknown arch '" + a.arch + "' (kmae|cnn)");
    }

    result.report.meta["config_hash"] = cfg.config_hash();
    write_text_atomic(a.out_ckpt + ".report.json",
                      result.report.to_json().dump(2) + "\n");
    write_text_atomic(a.out_ckpt + ".loss.csv", loss_curve_csv(result));
    std::cout << "finetune " << a.task << " done: final loss "
              << result.epoch_curve.back().first << ", R=" << spec.input_r
              << ", freeze_encoder=" << (spec.freeze_encoder ? "true" : "false")
              << ", checkpoint " << a.out_ckpt << "\n";
    return 0;
  });
}

int cmd_eval(const EvalArgs& a) {
  return guarded([&] {
    Dataset data = load_dataset(a.data);
    CheckpointData ckpt = load_checkpoint(a.ckpt);
    require_grid_match(grid_from_json(ckpt.meta.at("grid")), data.grid,
                       "eval checkpoint vs dataset");
    const Task task = task_from_name(ckpt.meta.at("task").get<std::string>());
    const auto r_list = parse_r_list(a.r_list);
    const int split = split_from_name(a.split);
    const std::string pred_path =
        a.predictions.empty() ? a.report + ".pred.kmae" : a.predictions;

    RunConfig defaults;
    TrainOptions opt = defaults.train;

    Container predictions;
    MetricsReport report;
    if (ckpt.meta.value("arch", "kmae") == "cnn") {
      CnnConfig ccfg = CnnConfig::from_json(ckpt.meta.at("cnn_config"));
      CnnBaseline<float> model(ccfg, 0);
      restore_params(model.params(), ckpt);
      report = cnn_evaluate(model, task, data, split, r_list, opt, a.seed,
                            &predictions);
    } else {
      ModelConfig mcfg = ModelConfig::from_json(ckpt.meta.at("model_config"));
      KmaeModel<float> model(mcfg, 0);
      restore_params(model.params(), ckpt);
      report =
          evaluate(model, task, data, split, r_list, opt, a.seed, &predictions);
    }

    // degradation deltas relative to R=1 when present
    if (report.per_r.count("1")) {
      nlohmann::json deltas;
      const auto& base = report.per_r.at("1");
      for (const auto& [rkey, metrics] : report.per_r) {
        nlohmann::json d;
        for (const auto& [name, value] : metrics) d[name] = value - base.at(name);
        deltas[rkey] = d;
      }
      report.meta["deltas_vs_r1"] = deltas;
    }

    report.meta["checkpoint"] = a.ckpt;
    report.meta["config_hash"] = ckpt.meta.value("config_hash", "");
    report.meta["predictions"] = pred_path;
    predictions.meta["checkpoint"] = a.ckpt;
    write_container(pred_path, predictions);
    write_text_atomic(a.report, report.to_json().dump(2) + "\n");

    std::cout << "eval " << report.task << " on " << report.split << ":";
    for (const auto& [rkey, metrics] : report.per_r)
      for (const auto& [name, value] : metrics)
        std::cout << " R=" << rkey << " " << name << "=" << value;
    std::cout << "\n";
    return 0;
  });
}

}  // namespace kmae::cli
