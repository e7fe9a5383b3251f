// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "trainwatch/rng.hpp"
#include "trainwatch/telemetry.hpp"

using namespace trainwatch;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("trainwatch_" + name)).string();
}

ParseError parse_failure(const std::string& line) {
  try {
    (void)parse_record(line);
  } catch (const ParseError& e) {
    return e;
  }
  ADD_FAILURE() << "no ParseError for " << line;
  return ParseError("none", 0, "");
}

}  // namespace

TEST(ParseRecord, GradientValues) {
  const auto r = parse_record(
      R"({"schema_version":1,"run_id":"r1","step":0,"layer":"fc1.weight","kind":"gradients","values":[0.1,-0.2]})");
  EXPECT_EQ(r.run_id, "r1");
  EXPECT_EQ(r.step, 0u);
  EXPECT_FALSE(r.epoch.has_value());
  EXPECT_EQ(r.layer, "fc1.weight");
  EXPECT_EQ(r.kind, TensorKind::gradients);
  ASSERT_TRUE(r.has_values());
  EXPECT_EQ(std::get<std::vector<double>>(r.payload), (std::vector<double>{0.1, -0.2}));
}

TEST(ParseRecord, LossMetric) {
  const auto r = parse_record(
      R"({"schema_version":1,"run_id":"r1","step":3,"layer":"_","kind":"metric","metric":{"name":"train_loss","value":115.0}})");
  ASSERT_TRUE(r.is_metric());
  EXPECT_EQ(std::get<MetricValue>(r.payload).name, "train_loss");
  EXPECT_EQ(std::get<MetricValue>(r.payload).value, 115.0);
}

TEST(ParseRecord, SummaryPayload) {
  const auto r = parse_record(
      R"({"schema_version":1,"run_id":"r","step":2,"epoch":1,"layer":"fc2.bias","kind":"biases","summary":)"
      R"({"count":5,"max":5,"min":1,"median":3,"mean":3,"var":2,"std":1.4142135623730951,"skew":0,"kurt":-1.3,"spar":0}})");
  ASSERT_TRUE(r.has_summary());
  EXPECT_EQ(r.epoch, 1u);
  const auto& s = std::get<LayerStats>(r.payload);
  EXPECT_EQ(s.count, 5u);
  EXPECT_EQ(s.kurt, -1.3);
}

TEST(ParseRecord, StringNaNIsNonFinite) {
  const std::string line =
      R"({"schema_version":1,"run_id":"r1","step":0,"layer":"fc1.weight","kind":"weights","values":[1.0,"NaN"]})";
  const auto e = parse_failure(line);
  EXPECT_EQ(e.detail(), "non-finite number");
  EXPECT_EQ(e.field(), "values");
  EXPECT_EQ(e.offset(), line.find("\"values\""));
}

TEST(ParseRecord, BareNonFiniteLiteralsRejected) {
  for (const char* tok : {"NaN", "Infinity", "-Infinity"}) {
    const std::string line = std::string(R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"weights","values":[1,)") +
                             tok + "]}";
    EXPECT_EQ(parse_failure(line).detail(), "non-finite number") << tok;
  }
  const std::string overflow =
      R"({"schema_version":1,"run_id":"r","step":0,"layer":"_","kind":"metric","metric":{"name":"l","value":1e999}})";
  EXPECT_EQ(parse_failure(overflow).detail(), "non-finite number");
}

TEST(ParseRecord, ErrorsNameTheField) {
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"activations","values":[1]})").field(),
            "kind");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","layer":"a","kind":"weights","values":[1]})").field(), "step");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":-1,"layer":"a","kind":"weights","values":[1]})").field(),
            "step");
  EXPECT_EQ(parse_failure(R"({"schema_version":2,"run_id":"r","step":0,"layer":"a","kind":"weights","values":[1]})").field(),
            "schema_version");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":0,"layer":"_","kind":"metric","metric":{"name":"l"}})").field(),
            "metric.value");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"weights"})").field(), "values");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"weights","values":[1],"summary":{}})")
                .field(),
            "summary");
  EXPECT_EQ(parse_failure(R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"metric","metric":{"name":"l","value":1}})")
                .field(),
            "layer");
}

TEST(ParseRecord, MalformedJsonReportsOffset) {
  const std::string line = R"({"schema_version":1,"run_id":"r",)";
  const auto e = parse_failure(line);
  EXPECT_EQ(e.detail(), "malformed JSON");
  EXPECT_GT(e.offset(), 0u);
}

TEST(ParseRecord, SummaryInvariantsEnforced) {
  const std::string bad =
      R"({"schema_version":1,"run_id":"r","step":0,"layer":"a","kind":"weights","summary":)"
      R"({"count":3,"max":1,"min":2,"median":1,"mean":1,"var":0,"std":0,"skew":0,"kurt":0,"spar":0}})";
  EXPECT_EQ(parse_failure(bad).field(), "summary.min");
}

TEST(SerializeRecord, RoundTripsEveryPayload) {
  const std::vector<TelemetryRecord> records{
      make_values_record("run", 4, 2, "fc1.weight", TensorKind::weights, {0.1, -1e-300, 3.0e12, 1.0 / 3.0}),
      make_summary_record("run", 5, std::nullopt, "fc1.bias", TensorKind::biases,
                          compute_stats(std::vector<double>{0.5, -0.25, 0.125})),
      make_metric_record("run", 6, 1, "train_loss", 0.6931471805599453)};
  for (const auto& r : records) {
    const std::string line = serialize_record(r);
    EXPECT_EQ(parse_record(line), r) << line;
    EXPECT_EQ(serialize_record(parse_record(line)), line);
  }
}

TEST(SerializeRecord, RefusesNonFinite) {
  const auto r = make_values_record("r", 0, std::nullopt, "a", TensorKind::weights,
                                    {std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(serialize_record(r), InvalidArgument);
}

TEST(SerializeRecord, FuzzRoundTrip) {
  Rng rng(31337);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> v(1 + rng.uniform_index(20));
    for (auto& x : v) {
      const std::uint64_t bits = rng.next();
      double d;
      std::memcpy(&d, &bits, sizeof d);
      x = std::isfinite(d) ? d : rng.normal();
    }
    const auto r = make_values_record("fz", rng.uniform_index(1000000), std::nullopt, "l", TensorKind::gradients, v);
    ASSERT_EQ(parse_record(serialize_record(r)), r);
  }
}

TEST(BuildTrace, TwoStepsOneLayer) {
  std::vector<TelemetryRecord> recs{
      make_values_record("r", 0, 0, "fc1.weight", TensorKind::weights, {1, 2}),
      make_values_record("r", 1, 0, "fc1.weight", TensorKind::weights, {1, 3})};
  const RunTrace t = build_trace(recs);
  EXPECT_EQ(t.layer_order(), std::vector<std::string>{"fc1.weight"});
  ASSERT_NE(t.series("fc1.weight", TensorKind::weights), nullptr);
  EXPECT_EQ(t.series("fc1.weight", TensorKind::weights)->size(), 2u);
  EXPECT_EQ(t.epoch_index().at(0), (StepRange{0, 1}));
}

TEST(BuildTrace, DuplicateKeyRejected) {
  std::vector<TelemetryRecord> recs{
      make_values_record("r", 0, std::nullopt, "fc1.weight", TensorKind::gradients, {1}),
      make_values_record("r", 0, std::nullopt, "fc1.weight", TensorKind::gradients, {2})};
  try {
    (void)build_trace(recs);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
}

TEST(BuildTrace, OutOfOrderWithinSeriesRejected) {
  std::vector<TelemetryRecord> recs{make_values_record("r", 2, std::nullopt, "a", TensorKind::weights, {1}),
                                    make_values_record("r", 1, std::nullopt, "a", TensorKind::weights, {1})};
  EXPECT_THROW(build_trace(recs), InvalidArgument);
}

TEST(BuildTrace, MixedRunsAndEmptyRejected) {
  std::vector<TelemetryRecord> recs{make_values_record("a", 0, std::nullopt, "l", TensorKind::weights, {1}),
                                    make_values_record("b", 1, std::nullopt, "l", TensorKind::weights, {1})};
  EXPECT_THROW(build_trace(recs), InvalidArgument);
  EXPECT_THROW(build_trace(std::vector<TelemetryRecord>{}), InvalidArgument);
}

TEST(BuildTrace, MetricsKeyedByName) {
  std::vector<TelemetryRecord> recs{make_metric_record("r", 0, 0, "train_loss", 1.0),
                                    make_metric_record("r", 0, 0, "val_loss", 2.0)};
  const auto t = build_trace(recs);
  EXPECT_EQ(t.metric("train_loss")->size(), 1u);
  EXPECT_EQ(t.metric("val_loss")->front().value, 2.0);
}

TEST(BuildTrace, InterleavingOfDistinctLayersDoesNotChangeSeries) {
  Rng rng(8);
  std::vector<TelemetryRecord> recs;
  for (std::uint64_t s = 0; s < 10; ++s)
    for (const char* layer : {"fc1.weight", "fc2.weight", "fc3.weight"}) {
      std::vector<double> v(5);
      for (auto& x : v) x = rng.normal();
      recs.push_back(make_values_record("r", s, std::nullopt, layer, TensorKind::weights, v));
    }
  // Group by layer (same per-layer order, different interleaving).
  std::vector<TelemetryRecord> grouped;
  for (const char* layer : {"fc1.weight", "fc2.weight", "fc3.weight"})
    for (const auto& r : recs)
      if (r.layer == layer) grouped.push_back(r);
  EXPECT_EQ(build_trace(recs).layers(), build_trace(grouped).layers());
}

TEST(BuildTrace, ValuesAndSummariesAgree) {
  Rng rng(21);
  std::vector<TelemetryRecord> raw, summarized;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::vector<double> v(1 + rng.uniform_index(64));
    for (auto& x : v) x = rng.normal(0.0, 0.1);
    raw.push_back(make_values_record("r", s, std::nullopt, "fc1.weight", TensorKind::weights, v));
    summarized.push_back(make_summary_record("r", s, std::nullopt, "fc1.weight", TensorKind::weights, compute_stats(v)));
    // Oracle check per record.
    const auto o = oracle::textbook_stats(v, kDefaultSparsityEps);
    const auto got = compute_stats(v);
    ASSERT_TRUE(oracle::close(got.var, o.var, 1e-9));
    ASSERT_TRUE(oracle::close(got.kurt, o.kurt, 1e-9));
  }
  const auto a = build_trace(raw), b = build_trace(summarized);
  const auto& sa = *a.series("fc1.weight", TensorKind::weights);
  const auto& sb = *b.series("fc1.weight", TensorKind::weights);
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i], sb[i]);
}

TEST(ReadRecords, PlainAndGzip) {
  const std::vector<TelemetryRecord> recs{make_metric_record("r", 0, 0, "train_loss", 0.7),
                                          make_values_record("r", 0, 0, "fc1.bias", TensorKind::biases, {0.1})};
  std::string text;
  for (const auto& r : recs) text += serialize_record(r) + "\n";

  const std::string plain = tmp_path("plain.jsonl");
  std::ofstream(plain) << text << "\n";
  EXPECT_EQ(read_records(plain), recs);

  const std::string gz = tmp_path("packed.jsonl.gz");
  gzFile f = gzopen(gz.c_str(), "wb");
  ASSERT_NE(f, nullptr);
  gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
  gzclose(f);
  EXPECT_EQ(read_records(gz), recs);
  std::filesystem::remove(plain);
  std::filesystem::remove(gz);
}

TEST(ReadRecords, ErrorCarriesLineNumber) {
  const std::string path = tmp_path("bad.jsonl");
  std::ofstream(path) << serialize_record(make_metric_record("r", 0, 0, "train_loss", 0.7)) << "\n"
                      << R"({"schema_version":1,"run_id":"r","step":1,"layer":"a","kind":"weights","values":["inf"]})"
                      << "\n";
  try {
    (void)read_records(path);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2: non-finite"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}
