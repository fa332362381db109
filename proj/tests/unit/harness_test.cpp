#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "medblip/harness/config.hpp"
#include "medblip/harness/evaluate.hpp"
#include "medblip/harness/gradcheck_runner.hpp"
#include "medblip/harness/model.hpp"
#include "medblip/harness/train.hpp"
#include "medblip/ndiff/checkpoint.hpp"
#include "medblip/ndiff/ops.hpp"
#include "test_util.hpp"

namespace nd = medblip::nd;
namespace data = medblip::data;
namespace h = medblip::harness;
using medblip::test::TempDir;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

h::RunConfig tiny_config(const std::filesystem::path& out) {
  h::RunConfig c;
  c.volume_dim = 16;
  c.patch = 8;
  c.vision_width = 16;
  c.vision_layers = 1;
  c.vision_heads = 2;
  c.queries = 4;
  c.qformer_width = 16;
  c.qformer_layers = 1;
  c.qformer_heads = 2;
  c.text_layers = 1;
  c.lm_width = 16;
  c.lm_layers = 1;
  c.lm_heads = 2;
  c.mlp_ratio = 2;
  c.lora_rank = 2;
  c.batch_size = 6;
  c.steps = 3;
  c.output_dir = out.string();
  return c;
}

// Small train/test manifests shared by the tests in this file.
class TinyData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    data::generate_dataset({.split = "train", .per_class = 4, .seed = 1, .generator = {.volume_dim = 16}},
                           dir_->path() / "train");
    data::generate_dataset({.split = "test", .per_class = 2, .seed = 2, .generator = {.volume_dim = 16}},
                           dir_->path() / "test");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::filesystem::path train_manifest() { return dir_->path() / "train/manifest.tsv"; }
  static std::filesystem::path test_manifest() { return dir_->path() / "test/manifest.tsv"; }

  h::RunConfig config(const std::string& run) const {
    auto c = tiny_config(scratch_.path() / run);
    c.train_manifest = train_manifest().string();
    c.test_manifest = test_manifest().string();
    return c;
  }

  TempDir scratch_;
  static TempDir* dir_;
};
TempDir* TinyData::dir_ = nullptr;

}  // namespace

TEST(Config, JsonRoundTrip) {
  h::RunConfig c;
  c.lr = 1e-3;
  c.mode = "frozen";
  c.qa_term = false;
  c.seed = 77;
  c.lora_targets = "q_proj";
  const auto back = h::config_from_json(h::config_to_json(c));
  EXPECT_EQ(h::config_to_json(back), h::config_to_json(c));
  EXPECT_EQ(back.lr, 1e-3);
  EXPECT_EQ(back.mode, "frozen");
  EXPECT_FALSE(back.qa_term);
}

TEST(Config, EveryKeyIsSerialized) {
  const auto j = nlohmann::json::parse(h::config_to_json(h::RunConfig{}));
  const auto keys = h::config_keys();
  EXPECT_EQ(j.size(), keys.size());
  for (const auto& k : keys) EXPECT_TRUE(j.contains(k.name)) << k.name;
}

TEST(Config, MissingKeysKeepDefaults) {
  const auto c = h::config_from_json(R"({"steps": 7})");
  EXPECT_EQ(c.steps, 7u);
  EXPECT_EQ(c.lr, h::RunConfig{}.lr);
}

TEST(Config, RejectsUnknownAndMistypedKeys) {
  EXPECT_THROW(h::config_from_json(R"({"stepz": 7})"), medblip::Error);
  EXPECT_THROW(h::config_from_json(R"({"steps": "many"})"), medblip::Error);
  EXPECT_THROW(h::config_from_json(R"({"steps": -1})"), medblip::Error);
  EXPECT_THROW(h::config_from_json(R"({"qa_term": 1})"), medblip::Error);
  EXPECT_THROW(h::config_from_json("[1, 2]"), medblip::Error);
  EXPECT_THROW(h::config_from_json("{"), medblip::Error);
}

TEST(Config, SetValueParsesByType) {
  h::RunConfig c;
  h::set_config_value(c, "lr", "0.25");
  h::set_config_value(c, "steps", "12");
  h::set_config_value(c, "qa_term", "false");
  h::set_config_value(c, "mode", "frozen");
  EXPECT_EQ(c.lr, 0.25);
  EXPECT_EQ(c.steps, 12u);
  EXPECT_FALSE(c.qa_term);
  EXPECT_EQ(c.mode, "frozen");
  EXPECT_THROW(h::set_config_value(c, "steps", "x"), medblip::Error);
  EXPECT_THROW(h::set_config_value(c, "nope", "1"), medblip::Error);
}

TEST(Config, ValidateCatchesInconsistencies) {
  h::RunConfig{}.validate();
  auto bad = [](auto edit) {
    h::RunConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), medblip::Error);
  };
  bad([](h::RunConfig& c) { c.mode = "full"; });
  bad([](h::RunConfig& c) { c.prompt_order = "sideways"; });
  bad([](h::RunConfig& c) { c.patch = 7; });
  bad([](h::RunConfig& c) { c.qformer_heads = 3; });
  bad([](h::RunConfig& c) { c.batch_size = 0; });
  bad([](h::RunConfig& c) { c.eval_method = "vote"; });
}

TEST(Config, FileRoundTrip) {
  TempDir dir;
  h::RunConfig c;
  c.steps = 9;
  h::save_config(c, dir.path() / "c.json");
  EXPECT_EQ(h::load_config(dir.path() / "c.json").steps, 9u);
  EXPECT_THROW(h::load_config(dir.path() / "missing.json"), medblip::Error);
}

TEST(Model, LoraModeLearnableSet) {
  const auto s = h::init_model<float>(h::RunConfig{});
  for (const auto& [name, e] : s.entries()) {
    const bool learnable = name.rfind("qformer.", 0) == 0 || name.rfind("embed.", 0) == 0 ||
                           name.rfind("prefix.", 0) == 0 || name.rfind("lora.", 0) == 0;
    EXPECT_EQ(!e.frozen, learnable) << name;
  }
}

TEST(Model, FrozenModeHasNoAdapters) {
  h::RunConfig c;
  c.mode = "frozen";
  const auto s = h::init_model<float>(c);
  for (const auto& [name, e] : s.entries()) {
    EXPECT_NE(name.rfind("lora.", 0), 0u) << name;
    if (name.rfind("lm.", 0) == 0 || name.rfind("vision.", 0) == 0) EXPECT_TRUE(e.frozen) << name;
  }
}

TEST(Model, ParamAccountingClosedForm) {
  h::RunConfig lora, frozen;
  frozen.mode = "frozen";
  const auto rl = h::count_params(h::init_model<float>(lora));
  const auto rf = h::count_params(h::init_model<float>(frozen));
  // layers * {q, v} * rank * (d_in + d_out)
  EXPECT_EQ(rl.lora_delta, 2u * 2u * 4u * (64u + 64u));
  EXPECT_EQ(rl.lora_delta, 2048u);
  EXPECT_EQ(rf.lora_delta, 0u);
  EXPECT_EQ(rl.learnable, rf.learnable + rl.lora_delta);
  EXPECT_GT(rl.learnable, rf.learnable);
  EXPECT_EQ(rl.total, rf.total + rl.lora_delta);
  EXPECT_EQ(rl.by_module.at("lora"), 2048u);
  EXPECT_NE(h::format_param_report(rl).find("lora-delta 2048"), std::string::npos);
}

TEST(Model, InitIsDeterministic) {
  EXPECT_TRUE(h::init_model<float>(h::RunConfig{}) == h::init_model<float>(h::RunConfig{}));
  h::RunConfig other;
  other.seed = 1;
  EXPECT_FALSE(h::init_model<float>(h::RunConfig{}) == h::init_model<float>(other));
}

TEST(Metrics, StepIndexMustIncrease) {
  TempDir dir;
  h::MetricsLog log(dir.path() / "m.jsonl", true);
  log.log_step(0, 1, 2, 3);
  log.log_step(4, 1, 2, 3);
  EXPECT_THROW(log.log_step(4, 1, 2, 3), medblip::Error);
  EXPECT_THROW(log.log_step(2, 1, 2, 3), medblip::Error);
  std::ifstream in(dir.path() / "m.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["event"], "step");
  EXPECT_EQ(j["l_total"], 3.0);
}

namespace {

data::Manifest balanced_manifest(std::size_t per_class) {
  data::Manifest m;
  for (std::size_t i = 0; i < per_class; ++i)
    for (data::Label l : data::kLabels) m.records.push_back({.id = std::to_string(m.records.size()), .label = l});
  return m;
}

}  // namespace

TEST(Scoring, ConstantDementiaAnswerScoresOneThird) {
  const auto m = balanced_manifest(5);
  const auto r = h::score_generated(m, std::vector<std::string>(15, "dementia"));
  EXPECT_EQ(r.correct, 5u);
  EXPECT_NEAR(r.accuracy, 1.0 / 3.0, 1e-15);
}

TEST(Scoring, NearMissesAreWrong) {
  const auto m = balanced_manifest(1);
  const auto r = h::score_generated(m, {"non demented .", "mild cognitive impairment", "Dementia"});
  EXPECT_EQ(r.correct, 1u);
  EXPECT_FALSE(r.records[0].predicted.has_value());
  EXPECT_THROW(h::score_generated(m, {"dementia"}), medblip::Error);
}

TEST(Scoring, RankTiesGoToFirstCandidate) {
  const auto m = balanced_manifest(4);
  const std::array<std::size_t, 3> lengths{3, 4, 2};
  std::vector<std::array<double, 3>> lp;
  for (std::size_t i = 0; i < 12; ++i) lp.push_back({-3 * 2.0, -4 * 2.0, -2 * 2.0});
  const auto per_token = h::score_ranked(m, lp, lengths, true);
  EXPECT_NEAR(per_token.accuracy, 1.0 / 3.0, 1e-15);
  for (const auto& e : per_token.records) EXPECT_EQ(*e.predicted, data::Label::NC);
  const auto summed = h::score_ranked(m, lp, lengths, false);
  for (const auto& e : summed.records) EXPECT_EQ(*e.predicted, data::Label::DEM);
}

TEST_F(TinyData, UniformLogitModelRanksAtChance) {
  auto c = config("uniform");
  auto s = h::init_model<float>(c);
  s.assign("lm.tok_embed", nd::Tensor<float>(s.value("lm.tok_embed").shape()));
  const auto ds = h::load_dataset(test_manifest(), c);
  const auto r = h::eval_zeroshot(s, c, ds, "rank", true);
  EXPECT_NEAR(r.accuracy, 1.0 / 3.0, 1e-12);
  for (const auto& e : r.records) {
    EXPECT_EQ(*e.predicted, data::Label::NC);
    EXPECT_NEAR(e.scores[0], e.scores[2], 1e-5);
  }
}

TEST_F(TinyData, GenerateAnswerValidatesQuestion) {
  auto c = config("gen");
  const auto s = h::init_model<float>(c);
  const auto ds = h::load_dataset(test_manifest(), c);
  const std::string id = ds.manifest.records[0].id;
  EXPECT_NO_THROW(h::generate_answer(s, c, ds, id, std::string(data::kQuestion)));
  EXPECT_EQ(h::generate_answer(s, c, ds, id, std::string(data::kQuestion)),
            h::generate_answer(s, c, ds, id, std::string(data::kQuestion)));
  EXPECT_THROW(h::generate_answer(s, c, ds, id, ""), medblip::Error);
  EXPECT_THROW(h::generate_answer(s, c, ds, id, "is this subject healthy ?"), medblip::Error);
  EXPECT_THROW(h::generate_answer(s, c, ds, "test-99999", std::string(data::kQuestion)), medblip::Error);
}

TEST_F(TinyData, ZeroStepsCheckpointEqualsInit) {
  auto c = config("zero");
  c.steps = 0;
  const auto r = h::train(c);
  EXPECT_TRUE(r.history.empty());
  EXPECT_TRUE(nd::load_checkpoint<float>(r.checkpoint) == h::init_model<float>(c));
}

TEST_F(TinyData, FreezeContractsHoldInBothModes) {
  for (const std::string mode : {"lora", "frozen"}) {
    auto c = config("freeze-" + mode);
    c.mode = mode;
    c.steps = 4;
    const auto init = h::init_model<float>(c);
    const auto trained = h::train(c).store;
    for (const auto& name : init.names()) {
      const bool same = init.value(name) == trained.value(name);
      if (name.rfind("vision.", 0) == 0 || name.rfind("lm.", 0) == 0) {
        EXPECT_TRUE(same) << mode << " " << name;
      } else if (name.rfind("lora.", 0) == 0 || name == "qformer.queries" || name == "embed.proj.weight") {
        EXPECT_FALSE(same) << mode << " " << name;
      }
    }
  }
}

TEST_F(TinyData, WarmupTrainsTheLmThenFreezesIt) {
  auto c = config("warm");
  c.lm_warmup_steps = 2;
  const auto init = h::init_model<float>(c);
  const auto trained = h::train(c).store;
  EXPECT_FALSE(init.value("lm.tok_embed") == trained.value("lm.tok_embed"));
  EXPECT_TRUE(trained.entries().at("lm.tok_embed").frozen);
}

TEST_F(TinyData, TwoRunsAreByteIdentical) {
  const auto a = config("a"), b = config("b");
  h::train(a);
  h::train(b);
  EXPECT_EQ(read_bytes(a.checkpoint_path()), read_bytes(b.checkpoint_path()));
  EXPECT_EQ(read_bytes(a.metrics_path()), read_bytes(b.metrics_path()));
  EXPECT_FALSE(read_bytes(a.metrics_path()).empty());
}

TEST_F(TinyData, MetricsLogHasStepsParamsAndEval) {
  auto c = config("log");
  h::train(c);
  std::ifstream in(c.metrics_path());
  std::vector<std::string> events;
  for (std::string line; std::getline(in, line);) events.push_back(nlohmann::json::parse(line)["event"]);
  ASSERT_EQ(events.size(), c.steps + 2);
  EXPECT_EQ(events[0], "step");
  EXPECT_EQ(events[c.steps], "params");
  EXPECT_EQ(events.back(), "eval");
  EXPECT_TRUE(std::filesystem::exists(h::config_path_for(c.checkpoint_path())));
}

TEST_F(TinyData, ReloadedCheckpointReproducesEval) {
  auto c = config("reload");
  const auto r = h::train(c);
  const auto ds = h::load_dataset(test_manifest(), c);
  const auto loaded = nd::load_checkpoint<float>(r.checkpoint);
  const auto reloaded_config = h::load_config(h::config_path_for(r.checkpoint));
  for (const std::string method : {"generate", "rank"}) {
    const auto a = h::eval_zeroshot(r.store, c, ds, method, false);
    const auto b = h::eval_zeroshot(loaded, reloaded_config, ds, method, false);
    EXPECT_EQ(a.correct, b.correct);
    for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].prediction, b.records[i].prediction);
  }
}

TEST_F(TinyData, DatasetTokensAndPatchShapes) {
  const auto c = config("ds");
  const auto ds = h::load_dataset(train_manifest(), c);
  ASSERT_EQ(ds.patches.size(), 12u);
  EXPECT_EQ(ds.patches[0].shape(), (nd::Shape{8, 512}));
  const auto b = h::make_batch<float>(ds, {0, 5});
  EXPECT_EQ(b.patches.shape(), (nd::Shape{2, 8, 512}));
  EXPECT_EQ(b.labels[1], ds.manifest.records[5].label);
  EXPECT_EQ(h::description_text(ds.texts[0]).front(), medblip::tokens::kBos);
  EXPECT_EQ(h::prompt_text(ds.texts[0], true).answer.back(), medblip::tokens::kEos);
  EXPECT_TRUE(h::prompt_text(ds.texts[0], false).answer.empty());
}

TEST(FeatureAlignment, GradientReachesQueriesAndEmbeddings) {
  auto c = h::micro_config();
  auto groups = h::micro_groups(7);
  // The full objective group carries a batch; reuse it with qa on and lambda 0.
  auto it = std::find_if(groups.begin(), groups.end(), [](const h::GradGroup& g) { return g.name == "L_total"; });
  ASSERT_NE(it, groups.end());
  nd::ParamScope<double> scope(it->store);
  const auto grads = scope.gradients(it->loss(scope));
  auto nonzero = [&](const std::string& name) {
    double n = 0;
    for (double v : grads.at(name).data()) n += v * v;
    return n > 0;
  };
  for (const char* name : {"qformer.queries", "embed.proj.weight", "qformer.text.tok_embed", "qformer.log_tau",
                           "prefix.proj.weight", "lora.0.q_proj.B"})
    EXPECT_TRUE(nonzero(name)) << name;
  EXPECT_EQ(grads.count("vision.layers.0.attn.q_proj.weight"), 0u);
  EXPECT_EQ(grads.count("lm.tok_embed"), 0u);
}

TEST(Gradcheck, MicroModelPasses) {
  const auto report = h::run_gradcheck(h::micro_groups(7));
  EXPECT_TRUE(report.pass) << h::format_gradcheck_report(report);
  EXPECT_GE(report.groups.size(), 6u);
  for (const auto& g : report.groups) {
    EXPECT_TRUE(g.failure.empty()) << g.name << ": " << g.failure;
    EXPECT_GT(g.checked_scalars, 0u) << g.name;
  }
}

TEST(Gradcheck, ReportIsDeterministic) {
  const auto a = h::format_gradcheck_report(h::run_gradcheck(h::micro_groups(7)));
  const auto b = h::format_gradcheck_report(h::run_gradcheck(h::micro_groups(7)));
  EXPECT_EQ(a, b);
}

TEST(Gradcheck, WrongBackwardRuleFailsAndIsNamed) {
  h::GradGroup bad{.name = "broken_square"};
  bad.store.add("w", medblip::test::random_tensor({3}, 4));
  bad.loss = [](nd::ParamScope<double>& scope) {
    const nd::Var<double> w = scope("w");
    nd::Tensor<double> sq = w.value();
    for (double& v : sq.storage()) v *= v;
    // Forward is w^2, backward claims 3w.
    auto out = nd::make_result<double>("broken_square", sq, {w}, [](nd::Node<double>& self) {
      auto& in = *self.inputs[0];
      for (std::size_t i = 0; i < in.value.numel(); ++i) in.grad_buffer()[i] += 3.0 * in.value[i] * self.grad[i];
    });
    return nd::sum(out);
  };
  std::vector<h::GradGroup> groups;
  groups.push_back(std::move(bad));
  const auto report = h::run_gradcheck(std::move(groups));
  EXPECT_FALSE(report.pass);
  ASSERT_EQ(report.groups.size(), 1u);
  EXPECT_FALSE(report.groups[0].pass);
  EXPECT_GT(report.groups[0].max_relative_error, 0.1);
  EXPECT_NE(h::format_gradcheck_report(report).find("broken_square"), std::string::npos);
}
