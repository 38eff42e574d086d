// SPDX-License-Identifier: Apache-2.0
//
// kmae: disease classification, phenotype regression and cardiac
// segmentation directly from (undersampled) complex-valued k-space, on a
// synthetic beating-heart phantom.
#include <CLI11.hpp>

#include "kmae/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"k-space masked autoencoder pipeline on a synthetic cardiac "
               "phantom"};
  app.require_subcommand(1);

  kmae::cli::GenArgs gen;
  auto* cgen = app.add_subcommand("gen", "generate a phantom cohort dataset");
  cgen->add_option("--out", gen.out, "output dataset container")->required();
  cgen->add_option("--subjects", gen.subjects, "number of subjects");
  cgen->add_option("--size", gen.size, "grid size H=W (power of two)");
  cgen->add_option("--frames", gen.frames, "temporal frames T");
  cgen->add_option("--slices", gen.slices, "slices S");
  cgen->add_option("--mode", gen.mode, "classify | regress");
  cgen->add_option("--balance", gen.class_balance, "class balance (classify)");
  cgen->add_option("--seed", gen.seed, "cohort seed");
  cgen->add_option("--config", gen.config_path, "phantom overrides (JSON)");

  kmae::cli::MasksArgs masks;
  auto* cmasks = app.add_subcommand("masks", "generate an undersampling mask");
  cmasks->add_option("--H", masks.num_lines, "phase-encode lines");
  cmasks->add_option("--T", masks.frames, "frames");
  cmasks->add_option("--R", masks.acceleration, "acceleration");
  cmasks->add_option("--acs", masks.acs_count, "ACS line count (-1: default)");
  cmasks->add_option("--seed", masks.seed, "seed");
  cmasks->add_option("--out", masks.out, "output mask container")->required();

  kmae::cli::PretrainArgs pre;
  auto* cpre = app.add_subcommand("pretrain", "k-space interpolation pre-training");
  cpre->add_option("--data", pre.data, "dataset container")->required();
  cpre->add_option("--config", pre.config_path, "run config (JSON)");
  cpre->add_option("--out-ckpt", pre.out_ckpt, "output checkpoint")->required();
  cpre->add_option("--epochs", pre.epochs, "override epochs");
  cpre->add_option("--seed", pre.seed, "override seed");

  kmae::cli::FinetuneArgs fin;
  auto* cfin = app.add_subcommand("finetune", "downstream task fine-tuning");
  cfin->add_option("--ckpt", fin.ckpt, "pre-trained checkpoint (kmae arch)");
  cfin->add_option("--data", fin.data, "dataset container")->required();
  cfin->add_option("--task", fin.task,
                   "classify | regress_ef | regress_edv | segment")
      ->required();
  cfin->add_option("--R", fin.acceleration, "training acceleration");
  cfin->add_flag("--freeze-encoder", fin.freeze_encoder, "freeze the encoder");
  cfin->add_option("--out-ckpt", fin.out_ckpt, "output checkpoint")->required();
  cfin->add_option("--arch", fin.arch, "kmae | cnn (baseline, no pre-training)");
  cfin->add_option("--epochs", fin.epochs, "override epochs");
  cfin->add_option("--seed", fin.seed, "override seed");
  cfin->add_option("--config", fin.config_path, "run config (JSON)");

  kmae::cli::EvalArgs ev;
  auto* cev = app.add_subcommand("eval", "evaluate a checkpoint over a split");
  cev->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  cev->add_option("--data", ev.data, "dataset container")->required();
  cev->add_option("--split", ev.split, "train | val | test");
  cev->add_option("--R", ev.r_list, "comma-separated accelerations");
  cev->add_option("--report", ev.report, "output report JSON")->required();
  cev->add_option("--predictions", ev.predictions,
                  "output predictions container");
  cev->add_option("--seed", ev.seed, "evaluation seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (cgen->parsed()) return kmae::cli::cmd_gen(gen);
  if (cmasks->parsed()) return kmae::cli::cmd_masks(masks);
  if (cpre->parsed()) return kmae::cli::cmd_pretrain(pre);
  if (cfin->parsed()) return kmae::cli::cmd_finetune(fin);
  if (cev->parsed()) return kmae::cli::cmd_eval(ev);
  return 1;
}
