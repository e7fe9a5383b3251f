// SPDX-License-Identifier: Apache-2.0
#pragma once

// Diagnostic reports. A DiagnosticReport is built once from the findings and
// the thresholds that produced them; the text, markdown and JSON renderings
// are all produced from it. The JSON form loads back into the same struct,
// so `trainwatch report` can re-render what `analyze` or `watch` wrote.
//
// Numbers in text and markdown use three significant digits ("9.87e-08");
// JSON keeps full precision.

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "trainwatch/config.hpp"
#include "trainwatch/error.hpp"
#include "trainwatch/symptoms.hpp"

namespace trainwatch {

inline constexpr std::string_view kReportSchema = "trainwatch.report/1";

enum class ReportFormat { text, markdown, json };

inline std::optional<ReportFormat> parse_report_format(std::string_view s) noexcept {
  if (s == "text" || s == "txt") return ReportFormat::text;
  if (s == "md" || s == "markdown") return ReportFormat::markdown;
  if (s == "json") return ReportFormat::json;
  return std::nullopt;
}

struct Interruption {
  std::uint64_t step = 0;
  Symptom trigger = Symptom::NearZeroBiases;
  friend bool operator==(const Interruption&, const Interruption&) = default;
};

struct DiagnosticReport {
  std::string run_id;
  std::vector<SymptomFinding> findings;
  /// Parallel to `findings`.
  std::vector<std::vector<std::string>> remediations;
  ThresholdConfig thresholds;
  std::string verdict;
  std::optional<Interruption> interruption;

  bool clean() const noexcept { return findings.empty(); }
  friend bool operator==(const DiagnosticReport&, const DiagnosticReport&) = default;
};

inline std::string verdict_for(const std::vector<SymptomFinding>& findings) {
  if (findings.empty()) return "no symptoms detected";
  std::size_t critical = 0;
  for (const auto& f : findings)
    if (f.severity == Severity::critical) ++critical;
  return fmt::format("{} symptom{} detected ({} critical, {} warning)", findings.size(),
                     findings.size() == 1 ? "" : "s", critical, findings.size() - critical);
}

inline DiagnosticReport make_report(std::string run_id, std::vector<SymptomFinding> findings,
                                    const ThresholdConfig& thresholds,
                                    const RemediationTable& remediations = default_remediation_table(),
                                    std::optional<Interruption> interruption = std::nullopt) {
  DiagnosticReport r;
  r.run_id = std::move(run_id);
  for (const auto& f : findings) r.remediations.push_back(remediations.suggestions(f.symptom));
  r.findings = std::move(findings);
  r.thresholds = thresholds;
  r.verdict = verdict_for(r.findings);
  r.interruption = interruption;
  return r;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json finding_to_json(const SymptomFinding& f) {
  nlohmann::ordered_json j;
  j["symptom"] = to_string(f.symptom);
  j["severity"] = to_string(f.severity);
  j["coverage"] = f.coverage;
  j["eligible_layers"] = f.eligible_layers;
  j["first_step"] = f.first_step;
  auto& layers = j["affected_layers"] = nlohmann::ordered_json::array();
  for (const auto& ev : f.affected_layers) {
    nlohmann::ordered_json l;
    l["layer"] = ev.layer;
    l["first_step"] = ev.first_step;
    auto& ms = l["measurements"] = nlohmann::ordered_json::array();
    for (const auto& m : ev.measurements) {
      nlohmann::ordered_json mj;
      mj["statistic"] = m.statistic;
      mj["value"] = m.value;
      mj["threshold"] = m.threshold;
      if (m.baseline) mj["baseline"] = *m.baseline;
      ms.push_back(std::move(mj));
    }
    layers.push_back(std::move(l));
  }
  auto& causes = j["suspected_causes"] = nlohmann::ordered_json::array();
  for (const auto& c : f.suspected_causes)
    causes.push_back({{"cause", to_string(c.cause)}, {"association", c.association}, {"strength", to_string(c.strength)}});
  return j;
}

namespace detail {

template <typename T>
T report_get(const nlohmann::json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError("report: missing field", 0, key);
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("report: wrong value type", 0, key);
  }
}

inline CauseStrength parse_strength(const std::string& s) {
  if (s == "weak") return CauseStrength::weak;
  if (s == "moderate") return CauseStrength::moderate;
  if (s == "strong") return CauseStrength::strong;
  throw ParseError("report: unknown cause strength '" + s + "'", 0, "strength");
}

}  // namespace detail

inline SymptomFinding finding_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("report: finding must be an object", 0, "findings");
  SymptomFinding f;
  const auto sym = parse_symptom(detail::report_get<std::string>(j, "symptom"));
  if (!sym) throw ParseError("report: unknown symptom", 0, "symptom");
  f.symptom = *sym;
  const auto sev = parse_severity(detail::report_get<std::string>(j, "severity"));
  if (!sev) throw ParseError("report: unknown severity", 0, "severity");
  f.severity = *sev;
  f.coverage = detail::report_get<double>(j, "coverage");
  f.eligible_layers = detail::report_get<std::size_t>(j, "eligible_layers");
  f.first_step = detail::report_get<std::uint64_t>(j, "first_step");
  for (const auto& l : detail::report_get<nlohmann::json>(j, "affected_layers")) {
    LayerEvidence ev;
    ev.layer = detail::report_get<std::string>(l, "layer");
    ev.first_step = detail::report_get<std::uint64_t>(l, "first_step");
    for (const auto& m : detail::report_get<nlohmann::json>(l, "measurements")) {
      Measurement mm;
      mm.statistic = detail::report_get<std::string>(m, "statistic");
      mm.value = detail::report_get<double>(m, "value");
      mm.threshold = detail::report_get<double>(m, "threshold");
      if (m.contains("baseline")) mm.baseline = detail::report_get<double>(m, "baseline");
      ev.measurements.push_back(std::move(mm));
    }
    f.affected_layers.push_back(std::move(ev));
  }
  for (const auto& c : detail::report_get<nlohmann::json>(j, "suspected_causes")) {
    const auto cause = parse_cause(detail::report_get<std::string>(c, "cause"));
    if (!cause) throw ParseError("report: unknown cause", 0, "cause");
    f.suspected_causes.push_back(
        {*cause, detail::report_get<double>(c, "association"), detail::parse_strength(detail::report_get<std::string>(c, "strength"))});
  }
  return f;
}

inline nlohmann::ordered_json report_to_json(const DiagnosticReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = kReportSchema;
  j["run_id"] = r.run_id;
  j["verdict"] = r.verdict;
  if (r.interruption) j["interrupted"] = {{"step", r.interruption->step}, {"trigger", to_string(r.interruption->trigger)}};
  auto& fs = j["findings"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.findings.size(); ++i) {
    auto f = finding_to_json(r.findings[i]);
    f["remediations"] = i < r.remediations.size() ? r.remediations[i] : std::vector<std::string>{};
    fs.push_back(std::move(f));
  }
  j["thresholds"] = thresholds_to_json(r.thresholds);
  return j;
}

/// Accepts a full report object or a bare array of findings; a bare array
/// gets default thresholds and the default remediation table.
inline DiagnosticReport report_from_json(const nlohmann::json& j) {
  if (j.is_array()) {
    std::vector<SymptomFinding> findings;
    for (const auto& f : j) findings.push_back(finding_from_json(f));
    return make_report("unknown", std::move(findings), ThresholdConfig{});
  }
  if (!j.is_object()) throw ParseError("report: expected an object or an array of findings", 0, "");
  if (j.value("schema", std::string()) != kReportSchema) throw ParseError("report: unsupported schema", 0, "schema");
  DiagnosticReport r;
  r.run_id = detail::report_get<std::string>(j, "run_id");
  r.verdict = detail::report_get<std::string>(j, "verdict");
  if (const auto it = j.find("interrupted"); it != j.end()) {
    const auto trigger = parse_symptom(detail::report_get<std::string>(*it, "trigger"));
    if (!trigger) throw ParseError("report: unknown symptom", 0, "trigger");
    r.interruption = Interruption{detail::report_get<std::uint64_t>(*it, "step"), *trigger};
  }
  for (const auto& f : detail::report_get<nlohmann::json>(j, "findings")) {
    r.findings.push_back(finding_from_json(f));
    r.remediations.push_back(f.contains("remediations") ? detail::report_get<std::vector<std::string>>(f, "remediations")
                                                        : std::vector<std::string>{});
  }
  try {
    r.thresholds = thresholds_from_json(detail::report_get<nlohmann::json>(j, "thresholds"));
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("report: ") + e.what(), 0, "thresholds");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Text and markdown

namespace detail {

inline std::string sci(double x) { return fmt::format("{:.2e}", x); }

inline std::string causes_line(const SymptomFinding& f) {
  if (f.suspected_causes.empty()) return "none recorded";
  std::string out;
  for (const auto& c : f.suspected_causes) {
    if (!out.empty()) out += ", ";
    out += fmt::format("{} ({:.2f}%, {})", to_string(c.cause), c.association, to_string(c.strength));
  }
  return out;
}

inline std::string coverage_line(const SymptomFinding& f) {
  return fmt::format("coverage {:.1f}% ({}/{} eligible layers), first seen at step {}", 100.0 * f.coverage,
                     f.affected_layers.size(), f.eligible_layers, f.first_step);
}

inline std::string measurement_line(const Measurement& m) {
  std::string out = fmt::format("{} {} (threshold {}", m.statistic, sci(m.value), sci(m.threshold));
  if (m.baseline) out += ", baseline " + sci(*m.baseline);
  return out + ")";
}

inline std::string threshold_value(const nlohmann::ordered_json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return fmt::format("{}", v.get<double>());
}

inline std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

inline std::string render_text(const DiagnosticReport& r) {
  std::string out;
  auto line = [&](const std::string& s) { out += s + '\n'; };
  line("trainwatch diagnostic report");
  line("run: " + r.run_id);
  line("verdict: " + r.verdict);
  if (r.interruption)
    line(fmt::format("interrupted: step {} on {}", r.interruption->step, to_string(r.interruption->trigger)));
  for (std::size_t i = 0; i < r.findings.size(); ++i) {
    const auto& f = r.findings[i];
    line("");
    line(fmt::format("[{}] {}", detail::upper(to_string(f.severity)), to_string(f.symptom)));
    line("  " + detail::coverage_line(f));
    for (const auto& ev : f.affected_layers) {
      line(fmt::format("  {} (step {}):", ev.layer, ev.first_step));
      for (const auto& m : ev.measurements) line("    " + detail::measurement_line(m));
    }
    line("  suspected causes: " + detail::causes_line(f));
    if (i < r.remediations.size() && !r.remediations[i].empty()) {
      line("  suggested remediation:");
      for (const auto& s : r.remediations[i]) line("    - " + s);
    }
  }
  line("");
  line("thresholds:");
  const auto echo = thresholds_to_json(r.thresholds);
  for (const auto& [k, v] : echo.items()) line(fmt::format("  {} = {}", k, detail::threshold_value(v)));
  return out;
}

inline std::string render_markdown(const DiagnosticReport& r) {
  std::string out;
  auto line = [&](const std::string& s) { out += s + '\n'; };
  line("# trainwatch diagnostic report");
  line("");
  line("- **run:** `" + r.run_id + "`");
  line("- **verdict:** " + r.verdict);
  if (r.interruption)
    line(fmt::format("- **interrupted:** step {} on {}", r.interruption->step, to_string(r.interruption->trigger)));
  for (std::size_t i = 0; i < r.findings.size(); ++i) {
    const auto& f = r.findings[i];
    line("");
    line(fmt::format("## {}. {} ({})", i + 1, to_string(f.symptom), to_string(f.severity)));
    line("");
    line(detail::coverage_line(f) + ".");
    line("");
    line("| layer | step | statistic | value | threshold | baseline |");
    line("|---|---:|---|---:|---:|---:|");
    for (const auto& ev : f.affected_layers)
      for (const auto& m : ev.measurements)
        line(fmt::format("| `{}` | {} | {} | {} | {} | {} |", ev.layer, ev.first_step, m.statistic, detail::sci(m.value),
                         detail::sci(m.threshold), m.baseline ? detail::sci(*m.baseline) : ""));
    line("");
    line("**Suspected causes:** " + detail::causes_line(f));
    if (i < r.remediations.size() && !r.remediations[i].empty()) {
      line("");
      line("**Suggested remediation:**");
      line("");
      for (const auto& s : r.remediations[i]) line("- " + s);
    }
  }
  line("");
  line("## Thresholds");
  line("");
  line("| key | value |");
  line("|---|---|");
  const auto echo = thresholds_to_json(r.thresholds);
  for (const auto& [k, v] : echo.items()) line(fmt::format("| {} | {} |", k, detail::threshold_value(v)));
  return out;
}

inline std::string render_report(const DiagnosticReport& r, ReportFormat format) {
  switch (format) {
    case ReportFormat::text: return render_text(r);
    case ReportFormat::markdown: return render_markdown(r);
    case ReportFormat::json: return report_to_json(r).dump(2) + '\n';
  }
  return {};
}

}  // namespace trainwatch
