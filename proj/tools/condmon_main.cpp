#include <CLI11.hpp>

#include "condmon/cli.hpp"

namespace cli = condmon::cli;

int main(int argc, char** argv) {
  CLI::App app{"condmon: learned action preconditions/effects and behavior-tree "
               "execution monitoring"};
  app.require_subcommand(1);

  // generate ----------------------------------------------------------------
  cli::GenerateOptions gen;
  auto* generate = app.add_subcommand("generate", "generate the synthetic toy corpus");
  generate->add_option("--out", gen.out, "output directory")->required();
  generate->add_option("--sessions", gen.sessions, "nominal 5-action sessions");
  generate->add_option("--spill-sessions", gen.spill_sessions, "sessions with a mid-pour spill");
  generate->add_option("--failed", gen.failed, "single failed pour demonstrations");
  generate->add_option("--seed", gen.seed, "corpus seed");
  generate->add_option("--data-dir", gen.data_dir, "copy the committed paraphrase bank from here");

  // prepare -----------------------------------------------------------------
  cli::PrepareOptions prep;
  auto* prepare = app.add_subcommand("prepare", "stratified split and optional features");
  prepare->add_option("--manifest", prep.manifest, "manifest file")->required();
  prepare->add_option("--out", prep.out, "output directory")->required();
  prepare->add_option("--train-frac", prep.train_frac, "train fraction (default 0.7)");
  prepare->add_option("--seed", prep.seed, "split seed");
  prepare->add_flag("--precompute", prep.precompute, "write feature files");
  prepare->add_option("--grid-side", prep.grid_side, "encoder grid side");
  prepare->add_option("--dim", prep.dim, "encoder working dimension");
  prepare->add_option("--encoder-seed", prep.encoder_seed, "frozen encoder seed");

  // train ---------------------------------------------------------------
  cli::TrainOptions tr;
  tr.config = cli::toy_run_config();
  std::string config_path;
  auto* train = app.add_subcommand("train", "train the phase classifier");
  train->add_option("--manifest", tr.manifest, "manifest file")->required();
  train->add_option("--split", tr.split, "split file")->required();
  train->add_option("--bank", tr.bank, "paraphrase bank")->required();
  train->add_option("--rules", tr.rules, "augmentation rules file");
  train->add_option("--out", tr.run_dir, "run directory")->required();
  train->add_option("--config", config_path, "run config JSON (flags override)");
  train->add_option("--variant", tr.variant,
                    "full | no_state_transformer | no_condition_transformer | no_consistency");
  auto* epochs_opt = train->add_option("--epochs", tr.config.train.epochs, "epochs");
  auto* batch_opt = train->add_option("--batch-demos", tr.config.train.batch_demos,
                                      "demonstrations per batch");
  auto* lr_opt = train->add_option("--peak-lr", tr.config.train.peak_lr, "peak learning rate");
  auto* wd_opt = train->add_option("--weight-decay", tr.config.train.weight_decay, "weight decay");
  auto* b1_opt = train->add_option("--beta1", tr.config.train.beta1, "first moment decay");
  auto* b2_opt = train->add_option("--beta2", tr.config.train.beta2, "second moment decay");
  auto* wu_opt = train->add_option("--warmup-frac", tr.config.train.warmup_fraction,
                                   "warmup fraction of total steps");
  auto* ml_opt = train->add_option("--min-lr", tr.config.train.min_lr, "schedule floor");
  auto* seed_opt = train->add_option("--seed", tr.config.train.seed, "training seed");
  auto* tpd_opt = train->add_option("--triplets-per-demo", tr.config.train.triplets_per_demo,
                                    "triplets sampled per demonstration");
  auto* aug_opt = train->add_option("--augment-prob", tr.config.train.augment_probability,
                                    "cross-action substitution probability");
  auto* par_opt = train->add_flag("--no-paraphrase", "train with fixed action descriptions");
  auto* clip_opt = train->add_option("--grad-clip", tr.config.train.grad_clip,
                                     "global gradient-norm clip (0 disables)");

  // eval ----------------------------------------------------------------
  cli::EvalOptions ev;
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  evalc->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  evalc->add_option("--manifest", ev.manifest, "manifest file")->required();
  evalc->add_option("--split", ev.split, "split file");
  evalc->add_option("--partition", ev.partition, "train or val (default val)");
  evalc->add_option("--bank", ev.bank, "paraphrase bank (for --paraphrased)");
  evalc->add_flag("--paraphrased", ev.paraphrased, "evaluate with paraphrased descriptions");
  evalc->add_flag("--oracle", ev.oracle, "use ground-truth labels as predictions");
  evalc->add_flag("--bench", ev.bench, "measure inference latency");
  evalc->add_option("--bench-batches", ev.bench_batches, "latency batches (default 1000)");
  evalc->add_option("--bench-actions", ev.bench_actions, "actions per batch (default 6)");
  evalc->add_option("--seed", ev.seed, "evaluation seed");
  evalc->add_option("--report-out", ev.report_out, "write reports JSON here");

  // monitor-sim ---------------------------------------------------------
  cli::MonitorSimOptions ms;
  auto* msim = app.add_subcommand("monitor-sim", "run the execution monitor on a script");
  msim->add_option("--script", ms.script, "scenario script")->required();
  msim->add_option("--tree", ms.tree, "behavior tree file")->required();
  msim->add_option("--checkpoint", ms.checkpoint, "checkpoint file");
  msim->add_flag("--oracle", ms.oracle, "use the symbolic oracle as predictor");
  msim->add_option("--out", ms.out, "output directory for event log and timeline");
  msim->add_option("--seed", ms.seed, "stream seed");

  CLI11_PARSE(app, argc, argv);

  return cli::guarded([&]() -> int {
    if (generate->parsed()) return cli::cmd_generate(gen);
    if (prepare->parsed()) return cli::cmd_prepare(prep);
    if (train->parsed()) {
      if (!config_path.empty()) {
        // Config file first, explicit flags win.
        cli::RunConfig file_cfg = cli::load_run_config(config_path);
        const cli::RunConfig flag_cfg = tr.config;
        tr.config = file_cfg;
        if (epochs_opt->count()) tr.config.train.epochs = flag_cfg.train.epochs;
        if (batch_opt->count()) tr.config.train.batch_demos = flag_cfg.train.batch_demos;
        if (lr_opt->count()) tr.config.train.peak_lr = flag_cfg.train.peak_lr;
        if (wd_opt->count()) tr.config.train.weight_decay = flag_cfg.train.weight_decay;
        if (b1_opt->count()) tr.config.train.beta1 = flag_cfg.train.beta1;
        if (b2_opt->count()) tr.config.train.beta2 = flag_cfg.train.beta2;
        if (wu_opt->count()) tr.config.train.warmup_fraction = flag_cfg.train.warmup_fraction;
        if (ml_opt->count()) tr.config.train.min_lr = flag_cfg.train.min_lr;
        if (seed_opt->count()) tr.config.train.seed = flag_cfg.train.seed;
        if (tpd_opt->count()) tr.config.train.triplets_per_demo = flag_cfg.train.triplets_per_demo;
        if (aug_opt->count())
          tr.config.train.augment_probability = flag_cfg.train.augment_probability;
        if (clip_opt->count()) tr.config.train.grad_clip = flag_cfg.train.grad_clip;
      }
      if (par_opt->count()) tr.config.train.use_paraphrasing = false;
      return cli::cmd_train(tr);
    }
    if (evalc->parsed()) return cli::cmd_eval(ev);
    if (msim->parsed()) {
      if (!ms.oracle && ms.checkpoint.empty())
        throw condmon::ConfigError("monitor-sim needs --checkpoint or --oracle");
      return cli::cmd_monitor_sim(ms);
    }
    return 1;
  });
}
