// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <string>

#include "trainwatch/io.hpp"
#include "trainwatch/report.hpp"

using namespace trainwatch;

namespace {

// Findings shaped like Appendix A's sample output.
std::vector<SymptomFinding> sample_findings() {
  SymptomFinding vanish;
  vanish.symptom = Symptom::VanishingGradients;
  vanish.severity = Severity::critical;
  vanish.eligible_layers = 3;
  vanish.coverage = 2.0 / 3.0;
  vanish.first_step = 120;
  vanish.affected_layers = {{"conv1.weight", 120, {{"median_norm_ratio", 9.87e-08, 1e-4, std::nullopt}}},
                            {"conv2.weight", 140, {{"median_norm_ratio", 3.45e-07, 1e-4, std::nullopt}}}};
  vanish.suspected_causes = attribute_causes(vanish);

  SymptomFinding explode;
  explode.symptom = Symptom::ExplodingGradients;
  explode.severity = Severity::warning;
  explode.eligible_layers = 4;
  explode.coverage = 0.25;
  explode.first_step = 7;
  explode.affected_layers = {{"fc1.weight", 7, {{"max_abs", 456.0, 2.0, 0.86}}}};
  explode.suspected_causes = attribute_causes(explode);

  SymptomFinding variance;
  variance.symptom = Symptom::AbnormalWeightVariance;
  variance.severity = Severity::warning;
  variance.eligible_layers = 4;
  variance.coverage = 0.25;
  variance.first_step = 300;
  variance.affected_layers = {{"embed_code.weight", 300, {{"final_var", 7.89, 1.5, std::nullopt}}}};
  variance.suspected_causes = attribute_causes(variance);

  return {vanish, explode, variance};
}

DiagnosticReport sample_report() {
  return make_report("appendix-a", sample_findings(), ThresholdConfig{}, default_remediation_table(),
                     Interruption{140, Symptom::VanishingGradients});
}

std::string golden_path(const std::string& name) { return std::string(TRAINWATCH_TEST_DATA) + "/" + name; }

void check_golden(const std::string& name, const std::string& actual) {
  const auto path = golden_path(name);
  if (std::getenv("TRAINWATCH_UPDATE_GOLDEN")) write_file_atomic(path, actual);
  EXPECT_EQ(read_file(path), actual) << "golden file " << path << " differs";
}

}  // namespace

TEST(Report, GoldenText) { check_golden("report_golden.txt", render_report(sample_report(), ReportFormat::text)); }

TEST(Report, GoldenMarkdown) {
  check_golden("report_golden.md", render_report(sample_report(), ReportFormat::markdown));
}

TEST(Report, GoldenJson) { check_golden("report_golden.json", render_report(sample_report(), ReportFormat::json)); }

TEST(Report, TextUsesThreeSignificantDigits) {
  const auto text = render_text(sample_report());
  EXPECT_NE(text.find("9.87e-08"), std::string::npos);
  EXPECT_NE(text.find("3.45e-07"), std::string::npos);
  EXPECT_NE(text.find("4.56e+02"), std::string::npos);
  EXPECT_NE(text.find("7.89e+00"), std::string::npos);
}

TEST(Report, JsonRoundTripIsLossless) {
  const auto r = sample_report();
  const auto back = report_from_json(nlohmann::json::parse(report_to_json(r).dump()));
  EXPECT_EQ(back, r);
  EXPECT_EQ(render_text(back), render_text(r));
}

TEST(Report, EveryFormatCarriesTheSameFindings) {
  const auto r = sample_report();
  const auto text = render_text(r);
  const auto md = render_markdown(r);
  const auto js = report_to_json(r).dump();
  for (const auto& f : r.findings) {
    const std::string name(to_string(f.symptom));
    EXPECT_NE(text.find(name), std::string::npos);
    EXPECT_NE(md.find(name), std::string::npos);
    EXPECT_NE(js.find(name), std::string::npos);
    for (const auto& ev : f.affected_layers) {
      EXPECT_NE(text.find(ev.layer), std::string::npos);
      EXPECT_NE(md.find(ev.layer), std::string::npos);
      EXPECT_NE(js.find(ev.layer), std::string::npos);
    }
  }
  for (const auto& list : r.remediations)
    for (const auto& s : list) {
      EXPECT_NE(text.find(s), std::string::npos);
      EXPECT_NE(md.find(s), std::string::npos);
      EXPECT_NE(js.find(s), std::string::npos);
    }
}

TEST(Report, RemediationsFollowTheTable) {
  const auto r = sample_report();
  ASSERT_EQ(r.remediations.size(), r.findings.size());
  EXPECT_EQ(r.remediations[1].front(), "apply feature normalization");

  RemediationTable custom;
  custom.set(Symptom::VanishingGradients, {"shorten the network"});
  const auto c = make_report("x", sample_findings(), ThresholdConfig{}, custom);
  EXPECT_EQ(c.remediations[0], std::vector<std::string>{"shorten the network"});
  EXPECT_TRUE(c.remediations[1].empty());
}

TEST(Report, CleanReport) {
  const auto r = make_report("clean", {}, ThresholdConfig{});
  EXPECT_TRUE(r.clean());
  EXPECT_EQ(r.verdict, "no symptoms detected");
  EXPECT_NE(render_text(r).find("verdict: no symptoms detected"), std::string::npos);
}

TEST(Report, VerdictCountsSeverities) {
  EXPECT_EQ(sample_report().verdict, "3 symptoms detected (1 critical, 2 warning)");
}

TEST(Report, BareFindingsArrayLoads) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& f : sample_findings()) arr.push_back(finding_to_json(f));
  const auto r = report_from_json(nlohmann::json::parse(arr.dump()));
  EXPECT_EQ(r.findings, sample_findings());
  EXPECT_EQ(r.remediations.size(), 3u);
}

TEST(Report, MalformedJsonIsRejected) {
  EXPECT_THROW(report_from_json(nlohmann::json::parse(R"({"schema": "other"})")), ParseError);
  EXPECT_THROW(report_from_json(nlohmann::json::parse(R"([{"symptom": "Nope"}])")), ParseError);
  EXPECT_THROW(report_from_json(nlohmann::json::parse("3")), ParseError);
}

TEST(Report, FormatNames) {
  EXPECT_EQ(parse_report_format("md"), ReportFormat::markdown);
  EXPECT_EQ(parse_report_format("text"), ReportFormat::text);
  EXPECT_EQ(parse_report_format("json"), ReportFormat::json);
  EXPECT_FALSE(parse_report_format("html"));
}
