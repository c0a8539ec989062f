#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "casvit/accounting.hpp"
#include "casvit/bench.hpp"
#include "casvit/checkpoint.hpp"
#include "casvit/dataset.hpp"
#include "casvit/gradcheck.hpp"
#include "casvit/train.hpp"

using namespace casvit;

namespace {

struct Size {
  std::size_t h = 224, w = 224;
};

Size parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const auto v = std::stoul(s);
      return {v, v};
    }
    std::size_t used = 0;
    const auto h = std::stoul(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const auto w = std::stoul(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw ConfigError("size must look like 224x224, got '" + s + "'");
  }
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("CASVIT_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("CASVIT_SEED is not an integer: '") + env + "'");
    }
  }
  return 0;
}

VariantConfig make_config(const std::string& variant, const std::string& proj, const std::string& mixer,
                          const std::string& ablation) {
  VariantConfig cfg = variant_config(variant);
  if (!proj.empty()) cfg.projection = parse_projection(proj);
  if (!mixer.empty()) cfg.mixer = parse_mixer(mixer);
  if (!ablation.empty()) cfg.ablation = parse_ablation(ablation);
  cfg.validate();
  return cfg;
}

void print_history_line(const EpochMetrics& m) {
  std::printf("epoch %zu  lr %.2e  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f  (%.1fs)\n",
              m.epoch, m.lr, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy, m.seconds);
  std::fflush(stdout);
}

std::size_t default_holdout(const Dataset& ds) {
  const std::size_t k = std::max<std::size_t>(ds.num_classes, 1);
  return ds.size() / 5 / k * k;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CAS-ViT backbone toolkit: build, count, check, train and benchmark"};
  app.require_subcommand(1);
  const std::string variants = "xs, s, m, t or tiny";

  std::string variant = "xs", proj, mixer, ablation, size_str = "224x224", csv_path, out_path, data_path, ckpt_path;
  std::string module = "catm";
  std::optional<double> tol;
  std::optional<std::uint64_t> seed_opt;
  std::size_t n = 4000, img_size = 32, classes = 4, epochs = 30, batch = 32, bench_batch = 1, iters = 5;
  std::optional<std::size_t> holdout;
  double lr = 2e-3;

  auto* build = app.add_subcommand("build", "Instantiate a variant and report its size");
  build->add_option("--variant", variant, variants);
  build->add_option("--proj", proj, "CATM projection: dw or dense");
  build->add_option("--seed", seed_opt, "Initialization seed");
  build->add_option("--out", out_path, "Write the initialized model as a checkpoint");

  auto* flops = app.add_subcommand("flops", "Analytic parameter and MAC counts");
  flops->add_option("--variant", variant, variants);
  flops->add_option("--size", size_str, "Input size HxW");
  flops->add_option("--proj", proj, "CATM projection: dw or dense");
  flops->add_option("--csv", csv_path, "Write the per-layer breakdown as CSV");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of a module in f64");
  gradcheck->add_option("--module", module, "One of the checkable modules")
      ->check(CLI::IsMember(gradcheck_modules()));
  gradcheck->add_option("--tol", tol, "Max relative error (default 1e-5, or 1e-4 for deep modules)");
  gradcheck->add_option("--seed", seed_opt, "Instance seed");

  auto* gen = app.add_subcommand("gen-data", "Generate the procedural shapes dataset");
  gen->add_option("--n", n, "Number of samples");
  gen->add_option("--size", img_size, "Image side length");
  gen->add_option("--classes", classes, "Number of classes (1-4)");
  gen->add_option("--seed", seed_opt, "Generator seed");
  gen->add_option("--out", out_path, "Output path")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a variant on a dataset file");
  train_cmd->add_option("--variant", variant, variants);
  train_cmd->add_option("--data", data_path, "Dataset file")->required();
  train_cmd->add_option("--epochs", epochs, "Epochs");
  train_cmd->add_option("--lr", lr, "Peak learning rate");
  train_cmd->add_option("--batch", batch, "Batch size");
  train_cmd->add_option("--holdout", holdout, "Samples held out for validation (default 20%)");
  train_cmd->add_option("--seed", seed_opt, "Initialization and shuffling seed");
  train_cmd->add_option("--proj", proj, "CATM projection: dw or dense");
  train_cmd->add_option("--mixer", mixer, "Token mixer: catm, pool, msa, separable, swift");
  train_cmd->add_option("--config", ablation, "Context-mapping arrangement");
  train_cmd->add_option("--out", out_path, "Checkpoint path");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval->add_option("--data", data_path, "Dataset file")->required();

  auto* bench = app.add_subcommand("bench", "Single-thread inference throughput");
  bench->add_option("--variant", variant, variants);
  bench->add_option("--size", size_str, "Input size HxW");
  bench->add_option("--batch", bench_batch, "Batch size");
  bench->add_option("--iters", iters, "Measured iterations");
  bench->add_option("--seed", seed_opt, "Seed");

  auto* ablate = app.add_subcommand("ablate", "Build (and optionally train) a mixer or context-mapping ablation");
  ablate->add_option("--variant", variant, variants);
  ablate->add_option("--mixer", mixer, "catm, pool, msa, separable or swift")
      ->check(CLI::IsMember({"catm", "pool", "msa", "separable", "swift"}));
  ablate->add_option("--config", ablation, "base, no_spatial, no_channel, split_sc or swapped_full")
      ->check(CLI::IsMember({"base", "no_spatial", "no_channel", "split_sc", "swapped_full"}));
  ablate->add_option("--proj", proj, "CATM projection: dw or dense");
  ablate->add_option("--size", size_str, "Input size HxW for the cost report");
  ablate->add_option("--data", data_path, "Train on this dataset file");
  ablate->add_option("--epochs", epochs, "Epochs when training");
  ablate->add_option("--lr", lr, "Peak learning rate when training");
  ablate->add_option("--seed", seed_opt, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const std::uint64_t seed = seed_opt ? *seed_opt : default_seed();

    if (*build) {
      const VariantConfig cfg = make_config(variant, proj, "", "");
      Model<float> model = build_variant<float>(cfg, seed);
      std::printf("%s  blocks [%zu %zu %zu %zu]  channels [%zu %zu %zu %zu]  projection %s\n", cfg.name.c_str(),
                  cfg.blocks[0], cfg.blocks[1], cfg.blocks[2], cfg.blocks[3], cfg.channels[0], cfg.channels[1],
                  cfg.channels[2], cfg.channels[3], projection_name(cfg.projection));
      std::printf("parameters %zu\n", count_parameters(model));
      if (!out_path.empty()) {
        save_checkpoint(model, out_path);
        std::printf("wrote %s\n", out_path.c_str());
      }
    } else if (*flops) {
      const Size s = parse_size(size_str);
      const VariantConfig cfg = make_config(variant, proj, "", "");
      Model<float> model = build_variant<float>(cfg, 0);
      const CostReport report = model_cost(model, s.h, s.w);
      std::cout << report.to_text();
      if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        f << report.to_csv();
        if (!f) throw std::runtime_error("cannot write " + csv_path);
      }
    } else if (*gradcheck) {
      ModuleCheckOptions opts;
      opts.seed = seed;
      const bool deep = module == "block" || module == "mini_backbone" || module == "backbone";
      opts.tol = tol ? *tol : (deep ? 1e-4 : 1e-5);
      const GradCheckReport r = gradcheck_module(module, opts);
      std::printf("%s: %s\n", module.c_str(), r.summary().c_str());
      std::printf("max relative error %.3e (worst: %s)\n", r.max_rel_error, r.worst_param.c_str());
      return r.passed ? 0 : 1;
    } else if (*gen) {
      const Dataset ds = generate_shapes_dataset(n, img_size, classes, seed);
      write_dataset(ds, out_path);
      std::cout << "wrote " << ds.size() << " samples of " << ds.height << "x" << ds.width << " to " << out_path << "\n";
    } else if (*train_cmd || (*ablate && !data_path.empty())) {
      VariantConfig cfg = make_config(variant, proj, mixer, ablation);
      const Dataset all = read_dataset(data_path);
      cfg.num_classes = all.num_classes;
      const auto [train_set, val_set] = split_dataset(all, holdout ? *holdout : default_holdout(all));
      Model<float> model = build_variant<float>(cfg, seed);
      TrainConfig tc;
      tc.epochs = epochs;
      tc.batch_size = batch;
      tc.base_lr = lr;
      tc.seed = seed;
      std::printf("training %s (%s, %s) on %zu samples, validating on %zu\n", cfg.name.c_str(),
                  mixer_name(cfg.mixer), ablation_name(cfg.ablation), train_set.size(), val_set.size());
      train(model, tc, train_set, val_set, print_history_line);
      if (!out_path.empty()) {
        save_checkpoint(model, out_path);
        std::printf("wrote %s\n", out_path.c_str());
      }
    } else if (*eval) {
      Model<float> model = load_checkpoint<float>(ckpt_path);
      const Dataset ds = read_dataset(data_path);
      const EvalResult r = evaluate(model, ds);
      std::printf("accuracy %.4f  loss %.4f  samples %zu\n", r.accuracy, r.loss, r.count);
    } else if (*bench) {
      const Size s = parse_size(size_str);
      const VariantConfig cfg = make_config(variant, proj, "", "");
      Model<float> model = build_variant<float>(cfg, seed);
      BenchOptions opts;
      opts.height = s.h;
      opts.width = s.w;
      opts.batch = bench_batch;
      opts.measure_iters = iters;
      opts.seed = seed;
      std::cout << cfg.name << " at " << s.h << "x" << s.w << ", batch " << bench_batch << "\n"
                << bench_throughput(model, opts).to_text();
    } else if (*ablate) {
      const Size s = parse_size(size_str);
      const VariantConfig cfg = make_config(variant, proj, mixer, ablation);
      Model<float> model = build_variant<float>(cfg, seed);
      std::printf("%s  mixer %s  config %s  projection %s\n", cfg.name.c_str(), mixer_name(cfg.mixer),
                  ablation_name(cfg.ablation), projection_name(cfg.projection));
      const CostReport report = model_cost(model, s.h, s.w);
      std::printf("parameters %llu  MACs at %zux%zu %llu\n", static_cast<unsigned long long>(report.params_total),
                  s.h, s.w, static_cast<unsigned long long>(report.macs_total));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
