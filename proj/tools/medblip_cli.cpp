#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "medblip/data/synthetic.hpp"
#include "medblip/harness/config.hpp"
#include "medblip/harness/evaluate.hpp"
#include "medblip/harness/gradcheck_runner.hpp"
#include "medblip/harness/model.hpp"
#include "medblip/harness/train.hpp"
#include "medblip/ndiff/checkpoint.hpp"
#include "medblip/ndiff/error.hpp"

namespace fs = std::filesystem;
using namespace medblip;

namespace {

harness::RunConfig config_for_checkpoint(const fs::path& ckpt) {
  const fs::path cfg = harness::config_path_for(ckpt);
  if (!fs::exists(cfg)) throw Error("no config next to checkpoint: expected " + cfg.string());
  return harness::load_config(cfg);
}

std::vector<data::Label> parse_classes(const std::string& list) {
  std::vector<data::Label> out;
  std::istringstream in(list);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(data::parse_label(item));
  if (out.empty()) throw Error("--classes is empty");
  return out;
}

const char* method_note(const std::string& method) {
  return method == "generate" ? "interpretation: greedy decode, exact match against canonical answers"
                              : "interpretation: highest answer log-probability among canonical answers";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MedBLIP desk-scale harness"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (volumes + manifest)");
  std::string classes = "NC,MCI,DEM", out_dir, split = "train", name = "synthetic";
  std::size_t per_class = 200, dim = 32;
  std::uint64_t gen_seed = 0;
  bool ambiguous = false;
  gen->add_option("--classes", classes, "Comma-separated class list")->capture_default_str();
  gen->add_option("--per-class", per_class, "Samples per class")->capture_default_str();
  gen->add_option("--dim", dim, "Volume side length")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Base seed")->capture_default_str();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--split", split, "Split name")->capture_default_str();
  gen->add_option("--name", name, "Dataset name")->capture_default_str();
  gen->add_flag("--ambiguous-text", ambiguous, "Draw description fields independently of the class");

  // train
  auto* tr = app.add_subcommand("train", "Train from a RunConfig; every --<key> overrides the file");
  std::string config_file;
  tr->add_option("--config", config_file, "RunConfig JSON file");
  std::map<std::string, std::string> overrides;
  for (const auto& key : harness::config_keys())
    tr->add_option_function<std::string>(
        "--" + key.name, [&overrides, k = key.name](const std::string& v) { overrides[k] = v; }, key.type);
  std::string dump_config;
  tr->add_option("--dump-config", dump_config, "Write the effective config to this path and exit");

  // eval
  auto* ev = app.add_subcommand("eval", "Zero-shot classification accuracy");
  std::string ckpt, manifest, method;
  bool per_token = false, show_records = false;
  ev->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  ev->add_option("--manifest", manifest, "Manifest path")->required();
  ev->add_option("--method", method, "generate | rank (default: from the run config)");
  ev->add_flag("--per-token", per_token, "Length-normalize candidate scores in rank mode");
  ev->add_flag("--records", show_records, "Print one line per sample");

  // generate
  auto* ge = app.add_subcommand("generate", "Answer a question about one sample");
  std::string sample, question = std::string(data::kQuestion);
  ge->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  ge->add_option("--manifest", manifest, "Manifest holding the sample")->required();
  ge->add_option("--sample", sample, "Sample id")->required();
  ge->add_option("--question", question, "Question text")->capture_default_str();

  // params
  auto* pa = app.add_subcommand("params", "Parameter accounting for a checkpoint");
  pa->add_option("--ckpt", ckpt, "Checkpoint path")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every module on a micro model");
  std::uint64_t gc_seed = 7;
  gc->add_option("--seed", gc_seed, "Seed for micro parameters and data")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      data::DatasetRequest req;
      req.name = name;
      req.split = split;
      req.per_class = per_class;
      req.classes = parse_classes(classes);
      req.seed = gen_seed;
      req.generator = {dim, ambiguous};
      const auto m = data::generate_dataset(req, out_dir);
      std::cout << "wrote " << m.records.size() << " samples to " << (fs::path(out_dir) / "manifest.tsv").string()
                << '\n';
      return 0;
    }
    if (*tr) {
      harness::RunConfig cfg = config_file.empty() ? harness::RunConfig{} : harness::load_config(config_file);
      for (const auto& [k, v] : overrides) harness::set_config_value(cfg, k, v);
      cfg.validate();
      if (!dump_config.empty()) {
        harness::save_config(cfg, dump_config);
        return 0;
      }
      const auto result = harness::train(cfg, &std::cout);
      std::cout << "checkpoint " << result.checkpoint.string() << '\n';
      return 0;
    }
    if (*ev) {
      const auto cfg = config_for_checkpoint(ckpt);
      const auto store = nd::load_checkpoint<float>(ckpt);
      const auto ds = harness::load_dataset(manifest, cfg);
      const std::string m = method.empty() ? cfg.eval_method : method;
      const auto r = harness::eval_zeroshot(store, cfg, ds, m, per_token || cfg.rank_per_token);
      if (show_records)
        for (const auto& e : r.records)
          std::cout << e.id << '\t' << data::label_name(e.label) << '\t' << e.prediction << '\t'
                    << (e.correct ? "correct" : "wrong") << '\n';
      std::cout << "method " << r.method << " (" << method_note(m) << ")\n"
                << "accuracy " << r.accuracy << " (" << r.correct << "/" << r.total << ")\n";
      return 0;
    }
    if (*ge) {
      const auto cfg = config_for_checkpoint(ckpt);
      const auto store = nd::load_checkpoint<float>(ckpt);
      const auto ds = harness::load_dataset(manifest, cfg);
      std::cout << harness::generate_answer(store, cfg, ds, sample, question) << '\n';
      return 0;
    }
    if (*pa) {
      const auto store = nd::load_checkpoint<float>(ckpt);
      const auto report = harness::count_params(store);
      std::cout << harness::format_param_report(report);
      harness::MetricsLog log(fs::path(ckpt).parent_path() / "metrics.jsonl", /*truncate=*/false);
      log.log_params(report.total, report.learnable, report.lora_delta, report.by_module);
      return 0;
    }
    if (*gc) {
      const auto report = harness::run_gradcheck(harness::micro_groups(gc_seed));
      std::cout << harness::format_gradcheck_report(report);
      return report.pass ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
