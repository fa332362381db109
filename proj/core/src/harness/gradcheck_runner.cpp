#include "medblip/harness/gradcheck_runner.hpp"

#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "medblip/harness/model.hpp"
#include "medblip/losses/objectives.hpp"
#include "medblip/ndiff/init.hpp"
#include "medblip/ndiff/ops.hpp"

namespace medblip::harness {

using nd::ParamScope;
using nd::ParamStore;
using nd::Tensor;
using nd::Var;

RunConfig micro_config() {
  RunConfig c;
  c.volume_dim = 8;
  c.patch = 4;
  c.vision_width = 6;
  c.vision_layers = 1;
  c.vision_heads = 2;
  c.queries = 2;
  c.qformer_width = 8;
  c.qformer_layers = 1;
  c.qformer_heads = 2;
  c.text_layers = 1;
  c.lm_width = 8;
  c.lm_layers = 1;
  c.lm_heads = 2;
  c.mlp_ratio = 2;
  c.mode = "lora";
  c.lora_rank = 2;
  c.lora_alpha = 4.0;
  c.batch_size = 3;
  return c;
}

namespace {

Tensor<double> random_tensor(const nd::Shape& shape, double stddev, std::uint64_t seed, const std::string& key) {
  return nd::truncated_normal<double>(shape, stddev, seed, key);
}

// Redraws every entry: gains near one, the temperature untouched, all else
// N(0, stddev^2) truncated.
void redraw(ParamStore<double>& store, std::uint64_t seed, double stddev = 0.3) {
  for (const std::string& name : store.names()) {
    const auto& shape = store.value(name).shape();
    if (name == "qformer.log_tau") continue;
    Tensor<double> v = random_tensor(shape, stddev, seed, "redraw:" + name);
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0)
      for (double& x : v.storage()) x = 1.0 + x;
    store.assign(name, v);
  }
}

// sum(out * R) for a fixed random R of out's shape.
Var<double> probe(const Var<double>& out, std::uint64_t seed, const std::string& key) {
  return nd::sum(nd::mul(out, Var<double>(random_tensor(out.shape(), 1.0, seed, "probe:" + key))));
}

Batch<double> micro_batch(const RunConfig& c, std::uint64_t seed) {
  Dataset ds;
  const auto grid = volume::PatchGrid::make(c.volume_dim, c.patch, c.patch);
  for (std::size_t i = 0; i < 3; ++i) {
    auto s = data::generate_sample(data::kLabels[i], data::sample_seed(seed, i), {c.volume_dim, false});
    s.record.id = "micro-" + std::to_string(i);
    ds.manifest.records.push_back(s.record);
    auto patches = volume::patchify<float>(s.volume, grid);
    volume::standardize_patches(patches);
    ds.patches.push_back(std::move(patches));
    ds.texts.push_back(data::build_texts(s.record));
  }
  return make_batch<double>(ds, {0, 1, 2});
}

}  // namespace

std::vector<GradGroup> micro_groups(std::uint64_t seed) {
  const RunConfig cfg = micro_config();
  const ModelDims dims = model_dims(cfg);
  const Batch<double> batch = micro_batch(cfg, seed);
  std::vector<GradGroup> groups;

  {
    ParamStore<double> s(seed);
    volume::init_embed(s, dims.embed, seed);
    redraw(s, seed);
    const Tensor<double> patches = batch.patches;
    groups.push_back({"volume-embed", std::move(s), [=](ParamScope<double>& scope) {
                        return probe(volume::embed_tokens(scope, dims.embed, Var<double>(patches)), seed, "embed");
                      }});
  }
  {
    // Encoder weights are opened up here so their backward rules are checked.
    ParamStore<double> s(seed);
    volume::init_embed(s, dims.embed, seed);
    vision::init_frozen(s, dims.vision);
    s.set_frozen_prefix("vision.", false);
    redraw(s, seed);
    const Tensor<double> patches = batch.patches;
    groups.push_back({"frozen-vision", std::move(s), [=](ParamScope<double>& scope) {
                        const auto tokens = volume::embed_tokens(scope, dims.embed, Var<double>(patches));
                        return probe(vision::encode_image(scope, dims.vision, tokens), seed, "vision");
                      }});
  }
  {
    ParamStore<double> s(seed);
    s.add("input.features", random_tensor({3, dims.embed.token_count(), dims.embed.d_vis}, 1.0, seed, "features"));
    qformer::QFormerConfig q = dims.qformer;
    q.text_layers = 0;
    q.vocab = 1;
    qformer::init_qformer(s, q, seed);
    for (const char* unused : {"qformer.text.tok_embed", "qformer.text.pos", "qformer.log_tau", "prefix.proj.weight"})
      s.set_frozen(unused, true);
    redraw(s, seed);
    groups.push_back({"medqformer-image", std::move(s), [=](ParamScope<double>& scope) {
                        return probe(qformer::qformer_encode_image(scope, q, scope("input.features")), seed, "qimg");
                      }});
  }
  {
    ParamStore<double> s(seed);
    qformer::QFormerConfig q = dims.qformer;
    q.layers = 0;
    qformer::init_qformer(s, q, seed);
    for (const char* unused : {"qformer.queries", "qformer.in_proj.weight", "qformer.in_proj.bias", "qformer.log_tau",
                               "prefix.proj.weight"})
      if (s.contains(unused)) s.set_frozen(unused, true);
    redraw(s, seed);
    std::vector<std::vector<int>> texts;
    for (const auto& t : batch.texts) texts.push_back(qa_text(t));  // ragged lengths exercise the padding mask
    groups.push_back({"medqformer-text", std::move(s), [=](ParamScope<double>& scope) {
                        return probe(qformer::text_encode(scope, q, texts).pooled, seed, "qtext");
                      }});
  }
  {
    ParamStore<double> s(seed);
    s.add("input.queries", random_tensor({3, dims.qformer.queries, dims.qformer.width}, 1.0, seed, "queries"));
    s.add("prefix.proj.weight", random_tensor({dims.qformer.width, dims.lm.width}, 0.3, seed, "prefix"));
    groups.push_back({"prefix-projection", std::move(s), [=](ParamScope<double>& scope) {
                        return probe(qformer::project_prefix(scope, scope("input.queries")), seed, "prefix");
                      }});
  }
  {
    ParamStore<double> s(seed);
    s.add("input.prefix", random_tensor({3, dims.qformer.queries, dims.lm.width}, 1.0, seed, "lm-prefix"));
    lm::init_lm(s, dims.lm, seed, false);
    lm::attach_lora(s, dims.lm, dims.lora, seed);
    s.set_frozen_prefix("lm.", false);
    redraw(s, seed);
    std::vector<lm::PromptText> prompts;
    for (const auto& t : batch.texts) prompts.push_back(prompt_text(t, true));
    const lm::LMConfig lmc = dims.lm;
    const lm::PromptOrder order = dims.order;
    groups.push_back({"lm-decoder", s, [=](ParamScope<double>& scope) {
                        const auto in = lm::assemble_input(scope, lmc, scope("input.prefix"), prompts, order);
                        return probe(lm::lm_forward(scope, lmc, in.embeddings), seed, "logits");
                      }});
    groups.push_back({"language-generation-loss", std::move(s), [=](ParamScope<double>& scope) {
                        const auto in = lm::assemble_input(scope, lmc, scope("input.prefix"), prompts, order);
                        return lm::language_generation_loss(lm::lm_forward(scope, lmc, in.embeddings), in);
                      }});
  }
  {
    ParamStore<double> s(seed);
    s.add("input.queries", random_tensor({3, dims.qformer.queries, dims.qformer.width}, 1.0, seed, "itc-z"));
    s.add("input.descriptions", random_tensor({3, dims.qformer.width}, 1.0, seed, "itc-t"));
    s.add("input.qa", random_tensor({3, dims.qformer.width}, 1.0, seed, "itc-qa"));
    s.add("qformer.log_tau", Tensor<double>({}, std::log(0.5)));
    groups.push_back({"feature-alignment-loss", std::move(s), [](ParamScope<double>& scope) {
                        return losses::feature_alignment_loss(scope("input.queries"), scope("input.descriptions"),
                                                              scope("input.qa"), scope("qformer.log_tau"));
                      }});
  }
  {
    ParamStore<double> s = init_model<double>(cfg);
    redraw(s, seed, 0.5);
    groups.push_back({"L_total", std::move(s), [=](ParamScope<double>& scope) {
                        return compute_losses(scope, dims, cfg, batch).total;
                      }});
  }
  return groups;
}

GradcheckReport run_gradcheck(std::vector<GradGroup> groups, double h, double tolerance) {
  GradcheckReport report;
  report.tolerance = tolerance;
  report.pass = true;
  for (auto& g : groups) {
    GradGroupResult r;
    r.name = g.name;
    try {
      const nd::FdReport fd = nd::finite_difference_check(g.loss, g.store, h);
      r.max_relative_error = fd.max_relative_error;
      r.per_parameter = fd.per_parameter;
      r.checked_scalars = fd.checked_scalars;
      r.pass = fd.max_relative_error < tolerance;
    } catch (const std::exception& e) {
      r.failure = e.what();
      r.max_relative_error = INFINITY;
      r.pass = false;
    }
    report.pass = report.pass && r.pass;
    report.groups.push_back(std::move(r));
  }
  return report;
}

std::string format_gradcheck_report(const GradcheckReport& report) {
  std::ostringstream out;
  out << std::scientific << std::setprecision(3);
  for (const auto& g : report.groups) {
    out << (g.pass ? "PASS " : "FAIL ") << g.name << "  max_rel_err " << g.max_relative_error << "  ("
        << g.checked_scalars << " scalars)\n";
    if (!g.failure.empty()) out << "    error: " << g.failure << '\n';
    for (const auto& [name, err] : g.per_parameter) out << "    " << name << "  " << err << '\n';
  }
  out << (report.pass ? "gradcheck PASS" : "gradcheck FAIL") << " (tolerance " << report.tolerance << ")\n";
  return out.str();
}

}  // namespace medblip::harness
