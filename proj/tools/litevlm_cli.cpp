#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "litevlm/litevlm.hpp"

namespace fs = std::filesystem;
using namespace litevlm;
using nlohmann::json;

namespace {

struct Global {
  std::string workdir = ".";
  std::size_t threads = 1;

  std::string path(const std::string& p) const {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(workdir) / p).string();
  }
};

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void announce(const json& resolved, std::uint64_t seed) {
  std::cerr << "config: " << resolved.dump() << "\n" << "seed: " << seed << "\n";
}

std::unique_ptr<std::ofstream> open_metrics(const std::string& path) {
  if (path.empty()) return nullptr;
  ensure_parent(path);
  auto os = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*os) throw Error("cannot write metrics file '" + path + "'");
  return os;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t scenes = 100;
  std::size_t queries = 10;
  std::uint64_t seed = 7;
  double val_fraction = 0.1;
  bool include_images = false;
  std::string out = "data";
};

void add_synth(CLI::App& app, SynthArgs& a) {
  app.add_option("--scenes", a.scenes, "Number of scenes")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--queries", a.queries, "Queries per scene")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--seed", a.seed, "Generation seed")->capture_default_str();
  app.add_option("--val-fraction", a.val_fraction, "Fraction of scenes held out for validation")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app.add_flag("--include-images", a.include_images, "Store rendered views as raw f32 planes");
  app.add_option("--out", a.out, "Output directory for train.lvcs and val.lvcs")->capture_default_str();
}

int run_synth(const Global& g, const SynthArgs& a) {
  if (a.scenes < 2) throw Error("synth: need at least 2 scenes for a train/val split");
  corpus::CorpusOptions opt;
  opt.n_scenes = a.scenes;
  opt.queries_per_scene = a.queries;
  opt.seed = a.seed;
  opt.split_seed = a.seed;
  opt.val_fraction = a.val_fraction;
  opt.threads = g.threads;
  opt.include_images = a.include_images;
  announce({{"scenes", a.scenes}, {"queries", a.queries}, {"val_fraction", a.val_fraction},
            {"include_images", a.include_images}, {"out", a.out}, {"threads", g.threads}},
           a.seed);
  const corpus::CorpusSplit split = corpus::build_corpus(opt);
  const std::string dir = g.path(a.out);
  fs::create_directories(dir);
  corpus::write_corpus(split.train, (fs::path(dir) / "train.lvcs").string());
  corpus::write_corpus(split.val, (fs::path(dir) / "val.lvcs").string());
  std::cout << "train: " << split.train.scenes.size() << " scenes, " << split.train.size() << " samples\n"
            << "val: " << split.val.scenes.size() << " scenes, " << split.val.size() << " samples\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-patchsel
// ---------------------------------------------------------------------------

struct PatchselArgs {
  std::string config;
  std::string train = "data/train.lvcs";
  std::string val = "data/val.lvcs";
  std::size_t steps = 2000;
  std::size_t batch = 8;
  float lr = 1e-3f;
  float threshold = 0.5f;
  std::optional<std::uint64_t> seed;
  std::string out = "params/patchsel.lvlm";
  std::string metrics;
};

void add_patchsel(CLI::App& app, PatchselArgs& a) {
  app.add_option("--config", a.config, "Pipeline config JSON (selector size, seed)");
  app.add_option("--train", a.train, "Training corpus")->capture_default_str();
  app.add_option("--val", a.val, "Validation corpus")->capture_default_str();
  app.add_option("--steps", a.steps, "Adam steps")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--batch", a.batch, "Samples per step")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--lr", a.lr, "Learning rate")->capture_default_str();
  app.add_option("--threshold", a.threshold, "View threshold used for validation F1")->capture_default_str();
  app.add_option("--seed", a.seed, "Seed (overrides the config)");
  app.add_option("--out", a.out, "Output parameter file")->capture_default_str();
  app.add_option("--metrics", a.metrics, "JSON-lines training log");
}

pipeline::PipelineConfig load_config(const Global& g, const std::string& path) {
  return path.empty() ? pipeline::PipelineConfig{} : pipeline::PipelineConfig::load(g.path(path));
}

int run_patchsel(const Global& g, const PatchselArgs& a) {
  pipeline::PipelineConfig cfg = load_config(g, a.config);
  if (a.seed) cfg.seed = cfg.selector.model.seed = *a.seed;
  announce({{"train", a.train}, {"val", a.val}, {"steps", a.steps}, {"batch", a.batch}, {"lr", a.lr},
            {"threshold", a.threshold}, {"out", a.out}, {"selector", pipeline::detail::model_json(cfg.selector.model)}},
           cfg.seed);
  const corpus::Corpus train = corpus::read_corpus(g.path(a.train));
  const corpus::Corpus val = corpus::read_corpus(g.path(a.val));
  patchsel::TrainOptions opt;
  opt.steps = a.steps;
  opt.batch = a.batch;
  opt.lr = a.lr;
  opt.seed = cfg.seed;
  opt.log_every = std::max<std::size_t>(1, a.steps / 10);
  const auto metrics = open_metrics(g.path(a.metrics));
  opt.metrics = metrics.get();
  patchsel::SelectionOptions so;
  so.threshold = a.threshold;
  const auto res =
      patchsel::train_patch_selector(train, &val, patchsel::init_selector_params(cfg.selector), cfg.selector, opt, so);
  const std::string out = g.path(a.out);
  ensure_parent(out);
  res.params.save(out);
  const patchsel::PatchSelector sel(cfg.selector, res.params);
  const auto model = patchsel::evaluate_selector(sel, val, so, patchsel::EvalMode::kModel);
  const auto lex = patchsel::evaluate_selector(sel, val, so, patchsel::EvalMode::kLexical);
  std::printf("loss: %.4f -> %.4f\n", res.first_loss, res.log.back().loss);
  std::printf("val macro-F1: overall %.4f, explicit %.4f, implicit %.4f; lexical explicit %.4f\n",
              model.overall.macro, model.explicit_only.macro, model.implicit_only.macro, lex.explicit_only.macro);
  std::cout << "wrote " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-toksel
// ---------------------------------------------------------------------------

struct TokselArgs {
  std::string config;
  std::string corpus = "data/train.lvcs";
  std::size_t samples = 16;
  std::size_t steps = 300;
  float lr = 1e-3f;
  float alpha = 0.5f;
  bool train_layer = false;
  std::optional<std::uint64_t> seed;
  std::string out = "params/toksel.lvlm";
  std::string metrics;
};

void add_toksel(CLI::App& app, TokselArgs& a) {
  app.add_option("--config", a.config, "Pipeline config JSON (model sizes, llm/vision parameters)");
  app.add_option("--corpus", a.corpus, "Training corpus")->capture_default_str();
  app.add_option("--samples", a.samples, "Sequences labeled from the corpus")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--steps", a.steps, "Adam steps")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--lr", a.lr, "Learning rate")->capture_default_str();
  app.add_option("--alpha", a.alpha, "Label weight on attention importance (rest on object boxes)")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app.add_flag("--train-layer", a.train_layer, "Also adapt the extracted decoder layer");
  app.add_option("--seed", a.seed, "Seed (overrides the config)");
  app.add_option("--out", a.out, "Output parameter file")->capture_default_str();
  app.add_option("--metrics", a.metrics, "JSON-lines training log");
}

int run_toksel(const Global& g, const TokselArgs& a) {
  pipeline::PipelineConfig cfg = load_config(g, a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
    pipeline::detail::apply_json(cfg, json::object(), false);
  }
  cfg.params.toksel.clear();
  announce({{"corpus", a.corpus}, {"samples", a.samples}, {"steps", a.steps}, {"lr", a.lr}, {"alpha", a.alpha},
            {"train_layer", a.train_layer}, {"out", a.out}, {"pipeline", cfg.to_json()}},
           cfg.seed);
  const corpus::Corpus data = corpus::read_corpus(g.path(a.corpus));
  const pipeline::Models models(cfg, g.workdir);
  const std::size_t n = std::min(a.samples, data.size());
  std::vector<toksel::LabeledSequence> seqs(n);
  corpus::detail::parallel_for(n, g.threads, [&](std::size_t i) {
    const auto& q = data.samples[i];
    seqs[i] = pipeline::labeled_sequence(models, data.scene(q.scene_id), q, a.alpha);
  });
  toksel::TrainOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.seed = cfg.seed;
  opt.train_layer = a.train_layer;
  opt.log_every = std::max<std::size_t>(1, a.steps / 10);
  const auto metrics = open_metrics(g.path(a.metrics));
  opt.metrics = metrics.get();
  const auto res = toksel::train_token_selector(seqs, models.toksel(), cfg.llm, opt);
  const std::string out = g.path(a.out);
  ensure_parent(out);
  res.params.save(out);
  double rho = 0.0;
  for (const auto& s : seqs) {
    const auto pred = toksel::head_importance(s.embeddings, res.params, cfg.llm, s.span);
    rho += toksel::spearman(pred.scores, s.labels);
  }
  std::printf("loss: %.4f -> %.4f\n", res.first_loss, res.log.back().loss);
  std::printf("mean Spearman (head vs labels): %.4f over %zu sequences\n", rho / static_cast<double>(n), n);
  std::cout << "wrote " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// distill-draft
// ---------------------------------------------------------------------------

struct DistillArgs {
  std::string config;
  std::string train = "data/train.lvcs";
  std::string val = "data/val.lvcs";
  std::size_t target_steps = 0;
  std::string target_out = "params/llm.lvlm";
  std::size_t examples = 400;
  std::size_t steps = 800;
  std::size_t batch = 4;
  float lr = 2e-3f;
  float lambda = 0.5f;
  std::optional<std::size_t> draft_len;
  std::optional<std::size_t> max_new;
  std::size_t eval_prompts = 100;
  std::optional<std::uint64_t> seed;
  std::string out = "params/draft.lvlm";
  std::string metrics;
};

void add_distill(CLI::App& app, DistillArgs& a) {
  app.add_option("--config", a.config, "Pipeline config JSON (llm size and parameters)");
  app.add_option("--train", a.train, "Training corpus")->capture_default_str();
  app.add_option("--val", a.val, "Held-out corpus for acceptance")->capture_default_str();
  app.add_option("--target-steps", a.target_steps, "Answer finetune steps for the target first (0: keep as loaded)")
      ->capture_default_str();
  app.add_option("--target-out", a.target_out, "Where the finetuned target is written")->capture_default_str();
  app.add_option("--examples", a.examples, "Training prompts turned into distillation examples")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--steps", a.steps, "Adam steps")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--batch", a.batch, "Examples per step")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--lr", a.lr, "Learning rate")->capture_default_str();
  app.add_option("--lambda", a.lambda, "Weight of the hidden-state regression term")->capture_default_str();
  app.add_option("--draft-len", a.draft_len, "Draft chain length D for evaluation (overrides the config)");
  app.add_option("--max-new", a.max_new, "Generated tokens per prompt (overrides the config)");
  app.add_option("--eval-prompts", a.eval_prompts, "Held-out prompts for acceptance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--seed", a.seed, "Seed (overrides the config)");
  app.add_option("--out", a.out, "Output draft parameter file")->capture_default_str();
  app.add_option("--metrics", a.metrics, "JSON-lines training log");
}

int run_distill(const Global& g, const DistillArgs& a) {
  pipeline::PipelineConfig cfg = load_config(g, a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
    pipeline::detail::apply_json(cfg, json::object(), false);
  }
  if (a.draft_len) cfg.draft_len = *a.draft_len;
  if (a.max_new) cfg.max_new = *a.max_new;
  spec::check_draft_len(cfg.draft_len);
  announce({{"train", a.train}, {"val", a.val}, {"target_steps", a.target_steps}, {"examples", a.examples},
            {"steps", a.steps}, {"batch", a.batch}, {"lr", a.lr}, {"lambda", a.lambda}, {"draft_len", cfg.draft_len},
            {"max_new", cfg.max_new}, {"eval_prompts", a.eval_prompts}, {"out", a.out}, {"llm", pipeline::detail::model_json(cfg.llm)}},
           cfg.seed);
  const corpus::Corpus train = corpus::read_corpus(g.path(a.train));
  const corpus::Corpus val = corpus::read_corpus(g.path(a.val));
  const auto metrics = open_metrics(g.path(a.metrics));

  nn::ParamSet llm_params = pipeline::load_role_params(cfg.params.llm, g.workdir, "llm.",
                                                        [&] { return nn::seeded_init(cfg.llm, "llm."); });
  if (a.target_steps > 0) {
    spec::FinetuneOptions fo;
    fo.steps = a.target_steps;
    fo.seed = cfg.seed;
    fo.log_every = std::max<std::size_t>(1, a.target_steps / 10);
    fo.metrics = metrics.get();
    const auto ft = spec::finetune_language_model(cfg.llm, std::move(llm_params), spec::answer_pairs(train), fo);
    llm_params = ft.params;
    const std::string out = g.path(a.target_out);
    ensure_parent(out);
    llm_params.save(out);
    std::printf("target finetune loss: %.4f -> %.4f (wrote %s)\n", ft.first_loss, ft.log.back().loss, out.c_str());
  }
  const nn::LanguageModel target(cfg.llm, std::move(llm_params));

  std::vector<spec::DistillExample> data;
  for (std::size_t i = 0; i < std::min(a.examples, train.size()); ++i)
    data.push_back(spec::make_distill_example(target, spec::text_prompt(corpus::builtin_vocab(), train.samples[i].raw),
                                              cfg.max_new, text::kEos));
  std::vector<std::vector<int>> held;
  for (std::size_t i = 0; i < std::min(a.eval_prompts, val.size()); ++i)
    held.push_back(spec::text_prompt(corpus::builtin_vocab(), val.samples[i].raw));

  spec::DistillOptions opt;
  opt.steps = a.steps;
  opt.batch = a.batch;
  opt.lr = a.lr;
  opt.lambda = a.lambda;
  opt.seed = cfg.seed;
  opt.log_every = std::max<std::size_t>(1, a.steps / 10);
  opt.metrics = metrics.get();
  const nn::ParamSet init = spec::init_draft_params(cfg.llm, cfg.seed + 1);
  const double before =
      spec::evaluate_acceptance(target, spec::DraftHead(target, init), held, cfg.draft_len, cfg.max_new, text::kEos)
          .mean_accepted();
  const auto res = spec::distill_draft(target, data, init, opt);
  const std::string out = g.path(a.out);
  ensure_parent(out);
  res.params.save(out);
  const spec::DecodeStats after =
      spec::evaluate_acceptance(target, spec::DraftHead(target, res.params), held, cfg.draft_len, cfg.max_new, text::kEos);
  std::printf("distill loss: %.4f -> %.4f\n", res.first_loss, res.log.back().loss);
  std::printf("held-out mean accepted per iteration at D=%zu: %.3f -> %.3f\n", cfg.draft_len, before,
              after.mean_accepted());
  std::cout << "acceptance: " << after.to_json().dump() << "\n" << "wrote " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string config;
  std::string corpus;
  std::size_t scenes = 4;
  std::size_t queries = 2;
  std::string variants = "baseline,fastv,litevlm";
  std::size_t limit = 0;
  std::string out;
  std::string format;
  bool include_wall = false;
  std::string prune_audit;
  std::string calibration;
  std::optional<std::uint64_t> seed;
  std::optional<double> keep_ratio;
  std::optional<float> threshold;
  std::optional<std::size_t> draft_len;
  std::optional<std::size_t> max_new;
  std::optional<std::string> precision;
  std::optional<std::string> granularity;
  std::optional<std::string> token_scores;
  bool forced_keep = false;
};

void add_bench(CLI::App& app, BenchArgs& a) {
  app.add_option("--config", a.config, "Pipeline config JSON");
  app.add_option("--corpus", a.corpus, "Corpus to benchmark (default: synthesize one from the seed)");
  app.add_option("--scenes", a.scenes, "Scenes in the synthesized corpus when --corpus is absent")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--queries", a.queries, "Queries per synthesized scene when --corpus is absent")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--variants", a.variants, "Comma-separated variants, optionally with :fp8 (e.g. litevlm:fp8)")
      ->capture_default_str();
  app.add_option("--limit", a.limit, "Samples to run (0: all)")->capture_default_str();
  app.add_option("--out", a.out, "Report path (default: stdout)");
  app.add_option("--format", a.format, "Report format: json, csv or markdown (default: from --out extension, else json)");
  app.add_flag("--include-wall", a.include_wall, "Add measured wall times to the JSON report");
  app.add_option("--prune-audit", a.prune_audit, "JSON-lines log of kept token indices");
  app.add_option("--calibration", a.calibration, "Latency calibration JSON (default: built-in table)");
  app.add_option("--seed", a.seed, "Seed for models and synthesized corpus (overrides the config)");
  app.add_option("--keep-ratio", a.keep_ratio, "Visual token keep ratio r (overrides the config)");
  app.add_option("--threshold", a.threshold, "Patch selection threshold (overrides the config)");
  app.add_option("--draft-len", a.draft_len, "Speculative draft length D (overrides the config)");
  app.add_option("--max-new", a.max_new, "Maximum generated tokens (overrides the config)");
  app.add_option("--precision", a.precision, "Latency profile: fp16 or fp8 (overrides the config)");
  app.add_option("--granularity", a.granularity, "Patch selection granularity: view or patch (overrides the config)");
  app.add_option("--token-scores", a.token_scores, "Token importance source: attention or trained (overrides the config)");
  app.add_flag("--forced-keep", a.forced_keep, "Always keep tokens overlapping object boxes");
}

pipeline::ReportFormat resolve_format(const std::string& format, const std::string& out) {
  if (!format.empty()) return pipeline::parse_report_format(format);
  const std::string ext = fs::path(out).extension().string();
  if (ext == ".csv") return pipeline::ReportFormat::kCsv;
  if (ext == ".md") return pipeline::ReportFormat::kMarkdown;
  return pipeline::ReportFormat::kJson;
}

void write_report(const pipeline::BenchReport& rep, pipeline::ReportFormat fmt, const std::string& out,
                  bool include_wall) {
  if (out.empty()) {
    std::cout << pipeline::format_report(rep, fmt, include_wall);
    return;
  }
  ensure_parent(out);
  pipeline::emit_report(rep, fmt, out, include_wall);
  std::cerr << "wrote " << out << "\n";
}

pipeline::CostCalibration load_calibration(const Global& g, const std::string& flag, const std::string& from_config) {
  const std::string p = !flag.empty() ? flag : from_config;
  return p.empty() ? pipeline::CostCalibration::builtin() : pipeline::CostCalibration::load(g.path(p));
}

int run_bench(const Global& g, const BenchArgs& a) {
  pipeline::PipelineConfig base = load_config(g, a.config);
  if (a.seed) {
    base.seed = *a.seed;
    pipeline::detail::apply_json(base, json::object(), false);
  }
  std::vector<pipeline::PipelineConfig> configs;
  std::stringstream list(a.variants);
  for (std::string item; std::getline(list, item, ',');) {
    if (item.empty()) continue;
    std::string name = item, prec;
    if (const auto colon = item.find(':'); colon != std::string::npos) {
      name = item.substr(0, colon);
      prec = item.substr(colon + 1);
    }
    pipeline::PipelineConfig c = base.for_variant(pipeline::parse_variant(name));
    if (a.keep_ratio && c.prunes()) c.keep_ratio = *a.keep_ratio;
    if (a.threshold && c.patch_selection()) c.threshold = *a.threshold;
    if (a.draft_len) c.draft_len = *a.draft_len;
    if (a.max_new) c.max_new = *a.max_new;
    if (a.precision) c.precision = pipeline::parse_precision(*a.precision);
    if (!prec.empty()) c.precision = pipeline::parse_precision(prec);
    if (a.granularity) c.granularity = patchsel::parse_granularity(*a.granularity);
    if (a.token_scores) c.token_scores = pipeline::parse_token_scores(*a.token_scores);
    if (a.forced_keep) c.forced_keep = true;
    pipeline::fill_variant_defaults(c);
    c.validate();
    configs.push_back(std::move(c));
  }
  if (configs.empty()) throw Error("bench: --variants names no variant");

  json resolved = json::array();
  for (const auto& c : configs) resolved.push_back(c.to_json());
  announce({{"variants", resolved}, {"corpus", a.corpus}, {"limit", a.limit}, {"threads", g.threads}}, base.seed);

  corpus::Corpus data;
  if (!a.corpus.empty()) {
    data = corpus::read_corpus(g.path(a.corpus));
  } else {
    corpus::CorpusOptions co;
    co.n_scenes = std::max<std::size_t>(2, a.scenes);
    co.queries_per_scene = a.queries;
    co.seed = co.split_seed = base.seed;
    co.threads = g.threads;
    data = corpus::build_corpus(co).train;
  }
  const pipeline::CostCalibration calib = load_calibration(g, a.calibration, base.calibration);

  std::unique_ptr<std::ofstream> audit;
  if (!a.prune_audit.empty()) {
    const std::string p = g.path(a.prune_audit);
    ensure_parent(p);
    audit = std::make_unique<std::ofstream>(p, std::ios::trunc);
    if (!*audit) throw Error("cannot write prune audit '" + p + "'");
  }
  pipeline::BenchOptions opt;
  opt.threads = g.threads;
  opt.limit = a.limit;
  opt.workdir = g.workdir;
  opt.prune_audit = audit.get();
  const pipeline::BenchReport rep = pipeline::bench(data, configs, calib, opt);
  const std::string out = g.path(a.out);
  write_report(rep, resolve_format(a.format, out), out, a.include_wall);
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string in;
  std::string calibration;
  std::string out;
  std::string format;
};

void add_report(CLI::App& app, ReportArgs& a) {
  app.add_option("--in", a.in, "Bench report to convert (.json or .csv); absent: modeled reference table");
  app.add_option("--calibration", a.calibration, "Calibration JSON for the reference table (default: built-in)");
  app.add_option("--out", a.out, "Output path (default: stdout)");
  app.add_option("--format", a.format, "json, csv or markdown (default: from --out extension, else markdown)");
}

int run_report(const Global& g, const ReportArgs& a) {
  announce({{"in", a.in}, {"calibration", a.calibration}, {"out", a.out}, {"format", a.format}}, 0);
  pipeline::BenchReport rep;
  if (a.in.empty()) {
    rep = pipeline::calibration_report(load_calibration(g, a.calibration, ""));
  } else {
    const std::string p = g.path(a.in);
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("report: cannot open '" + p + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (fs::path(p).extension() == ".csv") {
      rep = pipeline::report_from_csv(ss.str());
    } else {
      try {
        rep = pipeline::report_from_json(json::parse(ss.str()));
      } catch (const json::exception& e) {
        throw Error("report '" + p + "': " + e.what());
      }
    }
  }
  const std::string out = g.path(a.out);
  const pipeline::ReportFormat fmt = a.format.empty() && out.empty() ? pipeline::ReportFormat::kMarkdown
                                                                     : resolve_format(a.format, out);
  write_report(rep, fmt, out, false);
  return 0;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string calibration;
  std::size_t prompts = 100;
  std::uint64_t seed = 7;
};

void add_verify(CLI::App& app, VerifyArgs& a) {
  app.add_option("--calibration", a.calibration, "Calibration JSON (default: built-in)");
  app.add_option("--prompts", a.prompts, "Random prompts per draft length in the losslessness suite")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--seed", a.seed, "Seed for random prompts and models")->capture_default_str();
}

int run_verify(const Global& g, const VerifyArgs& a) {
  announce({{"calibration", a.calibration}, {"prompts", a.prompts}}, a.seed);
  verify::LosslessOptions lo;
  lo.prompts = a.prompts;
  lo.seed = a.seed;
  const auto suites = verify::run_all(load_calibration(g, a.calibration, ""), lo);
  std::size_t failed = 0, total = 0;
  for (const auto& s : suites) {
    verify::print_suite(std::cout, s);
    for (const auto& c : s.checks) failed += !c.passed;
    total += s.checks.size();
  }
  std::cout << (total - failed) << "/" << total << " checks passed\n";
  return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"litevlm: multi-view VLM latency toolkit (corpus synthesis, training, benchmarking)", "litevlm"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--workdir", g.workdir, "Directory all relative paths resolve against")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for the sample pool in synth, bench and train-toksel")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  SynthArgs synth;
  PatchselArgs patchsel_args;
  TokselArgs toksel_args;
  DistillArgs distill;
  BenchArgs bench;
  ReportArgs report;
  VerifyArgs verify_args;
  CLI::App* c_synth = app.add_subcommand("synth", "Generate a synthetic multi-view corpus (train.lvcs, val.lvcs)");
  CLI::App* c_patchsel = app.add_subcommand("train-patchsel", "Train the query-driven patch selector");
  CLI::App* c_toksel = app.add_subcommand("train-toksel", "Train the standalone token importance head");
  CLI::App* c_distill = app.add_subcommand("distill-draft", "Distill the speculative draft head from the target");
  CLI::App* c_bench = app.add_subcommand("bench", "Run pipeline variants over a corpus and emit a report");
  CLI::App* c_report = app.add_subcommand("report", "Convert a report or print the modeled reference table");
  CLI::App* c_verify = app.add_subcommand("verify", "Run the losslessness and token/latency arithmetic checks");
  add_synth(*c_synth, synth);
  add_patchsel(*c_patchsel, patchsel_args);
  add_toksel(*c_toksel, toksel_args);
  add_distill(*c_distill, distill);
  add_bench(*c_bench, bench);
  add_report(*c_report, report);
  add_verify(*c_verify, verify_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*c_synth) return run_synth(g, synth);
    if (*c_patchsel) return run_patchsel(g, patchsel_args);
    if (*c_toksel) return run_toksel(g, toksel_args);
    if (*c_distill) return run_distill(g, distill);
    if (*c_bench) return run_bench(g, bench);
    if (*c_report) return run_report(g, report);
    if (*c_verify) return run_verify(g, verify_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
