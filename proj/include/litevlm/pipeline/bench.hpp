#pragma once

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/corpus_io.hpp"
#include "litevlm/pipeline/config.hpp"
#include "litevlm/pipeline/cost_model.hpp"
#include "litevlm/pipeline/pipeline.hpp"

namespace litevlm::pipeline {

/// Per-variant corpus averages, modeled latency and speedup.
struct VariantRow {
  std::string label;
  std::string variant;
  std::string precision;
  std::size_t samples = 0;
  double patches = 0, input_tokens = 0, visual_kept = 0, text_tokens = 0, forced = 0;
  double generated_tokens = 0, decode_iterations = 0, mean_accepted = 0;
  double vit_madds = 0, prefill_madds = 0, decode_madds = 0, draft_madds = 0, selection_madds = 0, prune_madds = 0;
  LatencyBreakdown latency;
  double speedup = 1.0;
  StageWall wall;  ///< mean seconds per sample
};

struct BenchReport {
  std::size_t samples = 0;
  std::vector<VariantRow> rows;
};

struct BenchOptions {
  std::size_t threads = 1;
  std::size_t limit = 0;  ///< 0: every sample
  std::string workdir = ".";
  std::ostream* prune_audit = nullptr;
};

inline std::string row_label(const PipelineConfig& c) {
  std::ostringstream os;
  os << variant_name(c.variant);
  if (c.prunes()) os << "_r" << c.ratio();
  if (c.patch_selection()) os << "_t" << *c.threshold;
  if (c.precision == Precision::kFp8) os << "_fp8";
  return os.str();
}

namespace detail {

inline VariantRow average_row(const PipelineConfig& cfg, const std::vector<StageMetrics>& ms) {
  VariantRow r;
  r.label = row_label(cfg);
  r.variant = variant_name(cfg.variant);
  r.precision = precision_name(cfg.precision);
  r.samples = ms.size();
  const double n = static_cast<double>(ms.size());
  double iters = 0, gen = 0;
  for (const auto& m : ms) {
    r.patches += static_cast<double>(m.vit_patches);
    r.input_tokens += static_cast<double>(m.prefill_tokens);
    r.visual_kept += static_cast<double>(m.visual_kept);
    r.text_tokens += static_cast<double>(m.text_tokens);
    r.forced += static_cast<double>(m.forced_count);
    gen += static_cast<double>(m.generated_tokens);
    iters += static_cast<double>(m.decode_iterations);
    r.vit_madds += static_cast<double>(m.vit_madds);
    r.prefill_madds += static_cast<double>(m.prefill_madds);
    r.decode_madds += static_cast<double>(m.decode_madds);
    r.draft_madds += static_cast<double>(m.draft_madds);
    r.selection_madds += static_cast<double>(m.selection_madds);
    r.prune_madds += static_cast<double>(m.prune_madds);
    r.wall.selection += m.wall.selection;
    r.wall.vit += m.wall.vit;
    r.wall.prune += m.wall.prune;
    r.wall.prefill += m.wall.prefill;
    r.wall.decode += m.wall.decode;
  }
  r.mean_accepted = iters > 0 ? gen / iters : 0.0;
  for (double* f : {&r.patches, &r.input_tokens, &r.visual_kept, &r.text_tokens, &r.forced, &r.vit_madds,
                    &r.prefill_madds, &r.decode_madds, &r.draft_madds, &r.selection_madds, &r.prune_madds,
                    &r.wall.selection, &r.wall.vit, &r.wall.prune, &r.wall.prefill, &r.wall.decode})
    *f /= n;
  r.generated_tokens = gen / n;
  r.decode_iterations = iters / n;
  return r;
}

}  // namespace detail

/// Fills modeled latency and speedups. The reference is the baseline row
/// when present, otherwise a modeled full-image autoregressive run with the
/// same text length and generated tokens.
inline void apply_cost_model(BenchReport& rep, const CostCalibration& calib) {
  const VariantRow* base = nullptr;
  for (auto& r : rep.rows) {
    const bool spec = r.variant == "litevlm";
    r.latency = model_latency({r.patches, r.input_tokens, r.generated_tokens, spec, r.variant == "litevlm"}, calib,
                              parse_precision(r.precision));
    if (r.variant == "baseline" && r.precision == "fp16" && !base) base = &r;
  }
  for (auto& r : rep.rows) {
    const double ref =
        base ? base->latency.total_ms
             : model_latency({static_cast<double>(geometry::kNumSlots),
                              static_cast<double>(geometry::kNumSlots * geometry::kTokensPerPatch) + r.text_tokens,
                              r.generated_tokens, false, false},
                             calib, Precision::kFp16)
                   .total_ms;
    r.speedup = ref / r.latency.total_ms;
  }
}

/// Runs every config over the corpus samples (parallel over samples, merged
/// in sample order) and reports per-variant averages.
inline BenchReport bench(const corpus::Corpus& corpus, const std::vector<PipelineConfig>& configs,
                         const CostCalibration& calib, const BenchOptions& opt = {}) {
  if (corpus.samples.empty()) throw Error("bench: corpus has no samples");
  if (configs.empty()) throw Error("bench: no variants");
  const std::size_t n = opt.limit ? std::min(opt.limit, corpus.samples.size()) : corpus.samples.size();
  BenchReport rep;
  rep.samples = n;
  for (const auto& cfg : configs) {
    cfg.validate();
    const Models models(cfg, opt.workdir);
    std::vector<StageMetrics> ms(n);
    std::vector<std::string> audits(opt.prune_audit ? n : 0);
    corpus::detail::parallel_for(n, opt.threads, [&](std::size_t i) {
      const auto& q = corpus.samples[i];
      std::ostringstream audit;
      ms[i] = run_pipeline(models, corpus.scene(q.scene_id), q, cfg, opt.prune_audit ? &audit : nullptr, i).metrics;
      if (opt.prune_audit) audits[i] = audit.str();
    });
    for (const auto& a : audits) *opt.prune_audit << a;
    rep.rows.push_back(detail::average_row(cfg, ms));
  }
  apply_cost_model(rep, calib);
  return rep;
}

/// Rows built straight from calibration entries (patches, tokens and the
/// calibrated generated-token count), for reproducing the reference table.
inline BenchReport calibration_report(const CostCalibration& calib) {
  BenchReport rep;
  const double base = model_latency(row_inputs(calib.row("baseline"), calib), calib, Precision::kFp16).total_ms;
  for (const auto& c : calib.rows) {
    VariantRow r;
    r.label = c.name;
    r.variant = c.speculative ? (c.patch_selection ? "litevlm" : "eagle") : (c.input_tokens < 3214 ? "fastv" : "baseline");
    r.precision = c.precision;
    r.patches = c.patches;
    r.input_tokens = c.input_tokens;
    r.generated_tokens = calib.generated_tokens;
    r.latency = model_latency(row_inputs(c, calib), calib, parse_precision(c.precision));
    r.speedup = base / r.latency.total_ms;
    rep.rows.push_back(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report formats
// ---------------------------------------------------------------------------

enum class ReportFormat { kJson, kCsv, kMarkdown };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "json") return ReportFormat::kJson;
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "markdown" || s == "md") return ReportFormat::kMarkdown;
  throw Error("unknown report format '" + std::string(s) + "' (expected json, csv or markdown)");
}

namespace detail {

struct NumericField {
  const char* name;
  double VariantRow::*member;
};

inline const std::vector<NumericField>& numeric_fields() {
  static const std::vector<NumericField> f = {
      {"patches", &VariantRow::patches},
      {"input_tokens", &VariantRow::input_tokens},
      {"visual_kept", &VariantRow::visual_kept},
      {"text_tokens", &VariantRow::text_tokens},
      {"forced", &VariantRow::forced},
      {"generated_tokens", &VariantRow::generated_tokens},
      {"decode_iterations", &VariantRow::decode_iterations},
      {"mean_accepted", &VariantRow::mean_accepted},
      {"vit_madds", &VariantRow::vit_madds},
      {"prefill_madds", &VariantRow::prefill_madds},
      {"decode_madds", &VariantRow::decode_madds},
      {"draft_madds", &VariantRow::draft_madds},
      {"selection_madds", &VariantRow::selection_madds},
      {"prune_madds", &VariantRow::prune_madds},
      {"speedup", &VariantRow::speedup},
  };
  return f;
}

struct LatencyField {
  const char* name;
  double LatencyBreakdown::*member;
};

inline const std::vector<LatencyField>& latency_fields() {
  static const std::vector<LatencyField> f = {
      {"vit_ms", &LatencyBreakdown::vit_ms},         {"prefill_ms", &LatencyBreakdown::prefill_ms},
      {"extend_one_ms", &LatencyBreakdown::extend_one_ms}, {"decode_ms", &LatencyBreakdown::decode_ms},
      {"selection_ms", &LatencyBreakdown::selection_ms}, {"total_ms", &LatencyBreakdown::total_ms},
  };
  return f;
}

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Canonical JSON. Wall-clock times are left out unless requested so that
/// reruns with the same seeds are byte-identical.
inline nlohmann::json report_json(const BenchReport& rep, bool include_wall = false) {
  nlohmann::json j;
  j["format"] = "litevlm-bench";
  j["version"] = 1;
  j["samples"] = rep.samples;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json o;
    o["label"] = r.label;
    o["variant"] = r.variant;
    o["precision"] = r.precision;
    o["samples"] = r.samples;
    for (const auto& f : detail::numeric_fields()) o[f.name] = r.*(f.member);
    for (const auto& f : detail::latency_fields()) o[f.name] = r.latency.*(f.member);
    if (include_wall)
      o["wall_seconds"] = {{"selection", r.wall.selection}, {"vit", r.wall.vit}, {"prune", r.wall.prune},
                           {"prefill", r.wall.prefill},     {"decode", r.wall.decode}};
    j["rows"].push_back(o);
  }
  return j;
}

inline BenchReport report_from_json(const nlohmann::json& j) {
  BenchReport rep;
  try {
    if (j.at("format") != "litevlm-bench") throw Error("report: unexpected format");
    rep.samples = j.at("samples").get<std::size_t>();
    for (const auto& o : j.at("rows")) {
      VariantRow r;
      r.label = o.at("label").get<std::string>();
      r.variant = o.at("variant").get<std::string>();
      r.precision = o.at("precision").get<std::string>();
      r.samples = o.at("samples").get<std::size_t>();
      for (const auto& f : detail::numeric_fields()) r.*(f.member) = o.at(f.name).get<double>();
      for (const auto& f : detail::latency_fields()) r.latency.*(f.member) = o.at(f.name).get<double>();
      rep.rows.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("report: ") + e.what());
  }
  return rep;
}

inline std::vector<std::string> csv_header() {
  std::vector<std::string> h{"label", "variant", "precision", "samples"};
  for (const auto& f : detail::latency_fields()) h.push_back(f.name);
  for (const auto& f : detail::numeric_fields()) h.push_back(f.name);
  return h;
}

inline std::string report_csv(const BenchReport& rep) {
  std::ostringstream os;
  const auto header = csv_header();
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\r\n";
  for (const auto& r : rep.rows) {
    os << detail::csv_field(r.label) << ',' << detail::csv_field(r.variant) << ',' << detail::csv_field(r.precision)
       << ',' << r.samples;
    for (const auto& f : detail::latency_fields()) os << ',' << detail::g17(r.latency.*(f.member));
    for (const auto& f : detail::numeric_fields()) os << ',' << detail::g17(r.*(f.member));
    os << "\r\n";
  }
  return os.str();
}

/// RFC-4180 records: quoted fields may hold commas, doubled quotes and line
/// breaks; CRLF or LF ends a record.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      if (field_started) throw Error("csv: quote inside unquoted field");
      quoted = field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      rows.push_back(std::move(row));
      field.clear();
      row.clear();
      field_started = false;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw Error("csv: unterminated quoted field");
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline BenchReport report_from_csv(std::string_view text) {
  const auto rows = parse_csv(text);
  if (rows.empty() || rows[0] != csv_header()) throw Error("csv: unexpected header");
  BenchReport rep;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != rows[0].size()) throw Error("csv: row " + std::to_string(i) + " has wrong field count");
    VariantRow r;
    r.label = f[0];
    r.variant = f[1];
    r.precision = f[2];
    r.samples = std::stoul(f[3]);
    std::size_t k = 4;
    for (const auto& lf : detail::latency_fields()) r.latency.*(lf.member) = std::stod(f[k++]);
    for (const auto& nf : detail::numeric_fields()) r.*(nf.member) = std::stod(f[k++]);
    rep.samples = std::max(rep.samples, r.samples);
    rep.rows.push_back(r);
  }
  return rep;
}

/// Table with the nine stage columns of the reference latency table.
inline std::string report_markdown(const BenchReport& rep) {
  std::ostringstream os;
  os << "| Variant | Patches | ViT (ms) | Input tokens | Prefill (ms) | Extend-one (ms) | Decode (ms) | "
        "Selection (ms) | Total (ms) | Speed-up |\n";
  os << "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  os << std::fixed;
  for (const auto& r : rep.rows) {
    const auto& l = r.latency;
    os << "| " << r.label << " | " << std::setprecision(2) << r.patches << " | " << std::setprecision(1) << l.vit_ms
       << " | " << r.input_tokens << " | " << l.prefill_ms << " | " << l.extend_one_ms << " | " << l.decode_ms
       << " | " << l.selection_ms << " | " << l.total_ms << " | " << std::setprecision(2) << r.speedup << " |\n";
  }
  return os.str();
}

inline std::string format_report(const BenchReport& rep, ReportFormat fmt, bool include_wall = false) {
  switch (fmt) {
    case ReportFormat::kJson: return report_json(rep, include_wall).dump(2) + "\n";
    case ReportFormat::kCsv: return report_csv(rep);
    case ReportFormat::kMarkdown: return report_markdown(rep);
  }
  return {};
}

inline void emit_report(const BenchReport& rep, ReportFormat fmt, const std::string& path, bool include_wall = false) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write report '" + path + "'");
  os << format_report(rep, fmt, include_wall);
  if (!os) throw Error("failed writing report '" + path + "'");
}

}  // namespace litevlm::pipeline
