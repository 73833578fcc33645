#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "litevlm/corpus/corpus_io.hpp"
#include "litevlm/pipeline/bench.hpp"
#include "litevlm/pipeline/config.hpp"
#include "litevlm/pipeline/cost_model.hpp"
#include "litevlm/pipeline/pipeline.hpp"
#include "litevlm/spec/decoder.hpp"

using namespace litevlm;
using namespace litevlm::pipeline;

namespace {

PipelineConfig tiny_config(Variant v) {
  PipelineConfig c;
  c.variant = v;
  c.vit.model = {16, 2, 1, 32, 8, geometry::kTilesPerPatch, 7};
  c.llm.d_model = 32;
  c.llm.n_heads = 2;
  c.llm.n_layers = 1;
  c.llm.d_ff = 64;
  c.vit.d_llm = 32;
  c.selector.model.d_model = 16;
  c.selector.model.n_heads = 2;
  c.selector.model.d_ff = 32;
  c.max_new = 6;
  if (v != Variant::kBaseline) c.keep_ratio = 0.7;
  if (v == Variant::kLiteVlm) c.threshold = 0.5f;
  return c;
}

corpus::CorpusSplit small_corpus(std::size_t scenes = 4, std::size_t queries = 2) {
  corpus::CorpusOptions opt;
  opt.n_scenes = scenes;
  opt.queries_per_scene = queries;
  return corpus::build_corpus(opt);
}

std::size_t text_len(const corpus::QuerySample& q) { return corpus::builtin_vocab().encode(q.raw).size() + 2; }

}  // namespace

TEST(AnalyticMadds, PrefillMatchesCounter) {
  nn::ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.d_ff = 64;
  cfg.vocab_size = 40;
  cfg.max_seq = 512;
  const nn::LanguageModel lm(cfg, nn::seeded_init(cfg, "llm."));
  for (std::size_t n : {16u, 64u, 256u}) {
    std::vector<int> ids(n, 5);
    const auto r = spec::decode_autoregressive(lm, ids, 3, -1);
    EXPECT_EQ(r.stats.prefill_madds, prefill_madds(cfg, n)) << n;
    EXPECT_EQ(r.stats.decode_madds, decode_step_madds(cfg, n) + decode_step_madds(cfg, n + 1)) << n;
  }
  // Quadratic term: doubling n more than doubles the count.
  EXPECT_GT(prefill_madds(cfg, 512), 2 * prefill_madds(cfg, 256));
}

TEST(CostModel, ReproducesReferenceRows) {
  const CostCalibration c = CostCalibration::builtin();
  const auto base = model_latency(row_inputs(c.row("baseline"), c), c, Precision::kFp16);
  EXPECT_NEAR(base.total_ms, 529.7, 0.5);
  EXPECT_DOUBLE_EQ(base.vit_ms, 136.9);
  const auto lite = model_latency(row_inputs(c.row("litevlm"), c), c, Precision::kFp16);
  EXPECT_NEAR(lite.total_ms, 213.6, 1.0);
  EXPECT_NEAR(lite.vit_ms, 45.1, 1e-9);
  EXPECT_DOUBLE_EQ(lite.selection_ms, 10.2);
  const auto fp8 = model_latency(row_inputs(c.row("litevlm_fp8"), c), c, Precision::kFp8);
  EXPECT_NEAR(fp8.total_ms, 163.1, 0.5);
  for (const auto& row : calibration_report(c).rows) {
    const double want = c.row("baseline").total_ms / c.row(row.label).total_ms;
    EXPECT_NEAR(row.speedup / want, 1.0, 0.02) << row.label;
  }
  EXPECT_THROW(parse_precision("int4"), Error);
}

TEST(CostModel, InterpolationClampsAndVitIsLinear) {
  const std::vector<std::pair<double, double>> pts{{1, 10}, {3, 30}};
  EXPECT_DOUBLE_EQ(interpolate(pts, 0), 10);
  EXPECT_DOUBLE_EQ(interpolate(pts, 2), 20);
  EXPECT_DOUBLE_EQ(interpolate(pts, 9), 30);
  const CostCalibration c = CostCalibration::builtin();
  const double v1 = model_latency({1, 3214, 0, false, false}, c, Precision::kFp16).vit_ms;
  const double v2 = model_latency({2, 3214, 0, false, false}, c, Precision::kFp16).vit_ms;
  const double v5 = model_latency({5, 3214, 0, false, false}, c, Precision::kFp16).vit_ms;
  EXPECT_NEAR(v5 - v2, 3 * (v2 - v1), 1e-9);
}

TEST(CostModel, CalibrationParseErrors) {
  EXPECT_THROW(CostCalibration::parse("{}"), Error);
  EXPECT_THROW(CostCalibration::parse("not json"), Error);
  EXPECT_THROW(CostCalibration::load("/nonexistent/cal.json"), Error);
}

TEST(Config, JsonRoundTripAndOverrides) {
  const auto j = nlohmann::json::parse(R"({
    "variant": "fastv", "keep_ratio": 0.3, "seed": 11,
    "llm": {"d_model": 32, "n_heads": 2},
    "variants": {"litevlm": {"keep_ratio": 0.8, "threshold": 0.4, "precision": "fp8"}}
  })");
  const PipelineConfig c = PipelineConfig::from_json(j);
  EXPECT_EQ(c.variant, Variant::kFastV);
  EXPECT_EQ(c.llm.d_model, 32u);
  EXPECT_EQ(c.vit.d_llm, 32u);
  EXPECT_EQ(c.llm.seed, 11u);
  c.validate();
  const PipelineConfig back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  const PipelineConfig lite = c.for_variant(Variant::kLiteVlm);
  EXPECT_DOUBLE_EQ(*lite.keep_ratio, 0.8);
  EXPECT_EQ(lite.precision, Precision::kFp8);
  lite.validate();
  EXPECT_EQ(row_label(lite), "litevlm_r0.8_t0.4_fp8");
}

TEST(Config, ValidationErrors) {
  PipelineConfig c;
  c.variant = Variant::kFastV;
  EXPECT_THROW(c.validate(), Error);
  c.variant = Variant::kLiteVlm;
  c.keep_ratio = 0.5;
  EXPECT_THROW(c.validate(), Error);
  c.threshold = 0.5f;
  c.validate();
  c.keep_ratio = 1.5;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"bogus": 1})")), Error);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"variant": "eagle2"})")), Error);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::parse(R"({"precision": "fp4"})")), Error);
}

class PipelineRun : public ::testing::Test {
 protected:
  corpus::CorpusSplit split = small_corpus();
  const corpus::QuerySample& q0 = split.train.samples[0];
  const corpus::SceneSpec& s0 = split.train.scene(q0.scene_id);
};

TEST_F(PipelineRun, BaselineUsesAllPatchesAndTokens) {
  const PipelineConfig cfg = tiny_config(Variant::kBaseline);
  const Models models(cfg);
  const PipelineResult r = run_pipeline(models, s0, q0, cfg);
  const auto& m = r.metrics;
  EXPECT_EQ(m.vit_patches, 12u);
  EXPECT_EQ(m.prefill_tokens, 3072u + text_len(q0));
  EXPECT_EQ(m.text_tokens, text_len(q0));
  EXPECT_EQ(m.vit_madds, 12 * vision::vit_patch_madds(cfg.vit));
  EXPECT_EQ(m.prefill_madds, prefill_madds(cfg.llm, m.prefill_tokens));
  EXPECT_EQ(m.selection_madds, 0u);
  EXPECT_EQ(m.generated_tokens, r.tokens.size());
  EXPECT_EQ(m.decode_iterations, r.tokens.size());
  EXPECT_GE(r.tokens.size(), 1u);
}

TEST_F(PipelineRun, FastvPrunesToBudget) {
  PipelineConfig cfg = tiny_config(Variant::kFastV);
  const Models models(cfg);
  std::ostringstream audit;
  const auto m = run_pipeline(models, s0, q0, cfg, &audit, 3).metrics;
  EXPECT_EQ(m.visual_kept, 2150u);
  EXPECT_EQ(m.prefill_tokens, 2150u + text_len(q0));
  EXPECT_GT(m.prune_madds, 0u);
  EXPECT_EQ(nlohmann::json::parse(audit.str())["sample_id"], 3);
}

TEST_F(PipelineRun, ForcedKeepAccounting) {
  PipelineConfig cfg = tiny_config(Variant::kLiteVlm);
  cfg.forced_keep = true;
  cfg.keep_ratio = 0.05;
  const Models models(cfg);
  for (const auto& q : split.train.samples) {
    const auto m = run_pipeline(models, split.train.scene(q.scene_id), q, cfg).metrics;
    const auto budget = static_cast<std::size_t>(std::llround(0.05 * 256.0 * static_cast<double>(m.vit_patches)));
    EXPECT_EQ(m.visual_kept, std::max(budget, m.forced_count));
    EXPECT_EQ(m.prefill_tokens, m.text_tokens + m.visual_kept);
  }
}

TEST_F(PipelineRun, AllCamerasQueryKeepsEveryPatch) {
  const PipelineConfig cfg = tiny_config(Variant::kLiteVlm);
  const Models models(cfg);
  corpus::QuerySample q = q0;
  q.raw = "what is visible in all cameras ?";
  const auto m = run_pipeline(models, s0, q, cfg).metrics;
  EXPECT_EQ(m.vit_patches, 12u);
  EXPECT_EQ(m.visual_kept, 2150u);
  EXPECT_GT(m.selection_madds, 0u);
}

TEST_F(PipelineRun, FullSelectionNoPruningMatchesBaseline) {
  const PipelineConfig base = tiny_config(Variant::kBaseline);
  PipelineConfig lite = tiny_config(Variant::kLiteVlm);
  lite.threshold = 0.0f;
  lite.keep_ratio = 1.0;
  const Models mb(base), ml(lite);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& q = split.train.samples[i];
    const auto& s = split.train.scene(q.scene_id);
    const auto a = run_pipeline(mb, s, q, base);
    const auto b = run_pipeline(ml, s, q, lite);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(b.metrics.vit_patches, 12u);
    EXPECT_EQ(a.metrics.prefill_tokens, b.metrics.prefill_tokens);
  }
}

TEST_F(PipelineRun, MissingParameterFileNamesRole) {
  PipelineConfig cfg = tiny_config(Variant::kLiteVlm);
  cfg.params.draft = "no/such/draft.lvlm";
  try {
    const Models m(cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("draft."), std::string::npos) << e.what();
  }
}

TEST(Bench, SingleSampleAveragesAndSelfSpeedup) {
  const auto split = small_corpus(3, 1);
  const auto calib = CostCalibration::builtin();
  const PipelineConfig cfg = tiny_config(Variant::kBaseline);
  BenchOptions opt;
  opt.limit = 1;
  const BenchReport rep = bench(split.train, {cfg}, calib, opt);
  ASSERT_EQ(rep.rows.size(), 1u);
  const Models models(cfg);
  const auto& q = split.train.samples[0];
  const auto m = run_pipeline(models, split.train.scene(q.scene_id), q, cfg).metrics;
  const VariantRow& r = rep.rows[0];
  EXPECT_DOUBLE_EQ(r.patches, static_cast<double>(m.vit_patches));
  EXPECT_DOUBLE_EQ(r.input_tokens, static_cast<double>(m.prefill_tokens));
  EXPECT_DOUBLE_EQ(r.prefill_madds, static_cast<double>(m.prefill_madds));
  EXPECT_DOUBLE_EQ(r.generated_tokens, static_cast<double>(m.generated_tokens));
  EXPECT_DOUBLE_EQ(r.speedup, 1.0);
}

TEST(Bench, FastvCorpusAverageAndThreadDeterminism) {
  const auto split = small_corpus(3, 2);
  const auto calib = CostCalibration::builtin();
  const std::vector<PipelineConfig> cfgs{tiny_config(Variant::kBaseline), tiny_config(Variant::kFastV)};
  BenchOptions opt;
  opt.limit = 4;
  const BenchReport a = bench(split.train, cfgs, calib, opt);
  opt.threads = 2;
  const BenchReport b = bench(split.train, cfgs, calib, opt);
  EXPECT_EQ(report_json(a).dump(), report_json(b).dump());
  double mean_text = 0;
  for (std::size_t i = 0; i < 4; ++i) mean_text += static_cast<double>(text_len(split.train.samples[i]));
  mean_text /= 4;
  EXPECT_DOUBLE_EQ(a.rows[1].input_tokens, 2150.0 + mean_text);
  EXPECT_DOUBLE_EQ(a.rows[0].input_tokens, 3072.0 + mean_text);
  EXPECT_GT(a.rows[1].speedup, 1.0);
  EXPECT_THROW(bench(corpus::Corpus{}, cfgs, calib), Error);
}

TEST(Reports, JsonCsvJsonRoundTrip) {
  BenchReport rep = calibration_report(CostCalibration::builtin());
  rep.rows[0].label = "base, \"quoted\"";
  rep.rows[1].mean_accepted = 1.0 / 3.0;
  const BenchReport back = report_from_csv(report_csv(rep));
  EXPECT_EQ(report_json(back), report_json(rep));
  EXPECT_EQ(report_json(report_from_json(report_json(rep))), report_json(rep));
}

TEST(Reports, CsvParserRfc4180) {
  const auto rows = parse_csv("a,\"b,c\",\"say \"\"hi\"\"\"\r\n1,\"x\r\ny\",\r\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"a", "b,c", "say \"hi\""}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"1", "x\r\ny", ""}));
  EXPECT_THROW(parse_csv("\"open"), Error);
  EXPECT_THROW(report_from_csv("wrong,header\r\n"), Error);
}

TEST(Reports, MarkdownHasNineNumericColumns) {
  const BenchReport rep = calibration_report(CostCalibration::builtin());
  std::istringstream md(report_markdown(rep));
  std::string line;
  std::getline(md, line);
  std::getline(md, line);
  std::size_t rows = 0;
  while (std::getline(md, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '|')) cells.push_back(cell);
    // leading empty cell, label, nine numbers
    ASSERT_EQ(cells.size(), 11u) << line;
    for (std::size_t i = 2; i < cells.size(); ++i) EXPECT_NO_THROW((void)std::stod(cells[i])) << cells[i];
    ++rows;
  }
  EXPECT_EQ(rows, rep.rows.size());
}

TEST(Reports, UnwritablePathThrows) {
  const BenchReport rep = calibration_report(CostCalibration::builtin());
  EXPECT_THROW(emit_report(rep, ReportFormat::kJson, "/nonexistent-dir/x/report.json"), Error);
  const auto tmp = std::filesystem::temp_directory_path() / "litevlm_report_test.md";
  emit_report(rep, ReportFormat::kMarkdown, tmp.string());
  EXPECT_TRUE(std::filesystem::exists(tmp));
  std::filesystem::remove(tmp);
  EXPECT_THROW(parse_report_format("xml"), Error);
}
