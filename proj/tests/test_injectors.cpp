// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "trainwatch/dataset.hpp"
#include "trainwatch/injectors.hpp"

using namespace trainwatch;

namespace {

Dataset make_dataset(std::vector<std::size_t> per_class, std::size_t d = 2, std::uint64_t seed = 1) {
  Dataset ds;
  std::size_t n = 0;
  for (auto c : per_class) n += c;
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Rng rng(seed);
  for (std::size_t k = 0; k < per_class.size(); ++k)
    for (std::size_t i = 0; i < per_class[k]; ++i) ds.labels.push_back(static_cast<int>(k + 1));
  for (Eigen::Index i = 0; i < ds.features.size(); ++i) ds.features.data()[i] = rng.normal();
  for (std::size_t j = 0; j < d; ++j) ds.column_names.push_back("x" + std::to_string(j + 1));
  ds.num_classes = static_cast<int>(per_class.size());
  return ds;
}

}  // namespace

TEST(Csv, ReadsHeaderLabelsAndMissingCells) {
  const auto ds = parse_csv("a,b,label\n1,2,1\n3,,2\n-4.5,6e1,2\n");
  ASSERT_EQ(ds.rows(), 3u);
  EXPECT_EQ(ds.column_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 2, 2}));
  EXPECT_EQ(ds.num_classes, 2);
  EXPECT_TRUE(std::isnan(ds.features(1, 1)));
  EXPECT_DOUBLE_EQ(ds.features(2, 1), 60.0);
}

TEST(Csv, TimestampColumnAndRoundTrip) {
  CsvOptions opt;
  opt.label_column = "y";
  opt.timestamp_column = "t";
  const auto ds = parse_csv("t,x,y\n3,0.1,1\n1,,2\n2,0.30000000000000004,1\n", opt);
  ASSERT_TRUE(ds.timestamps);
  EXPECT_EQ(*ds.timestamps, (std::vector<double>{3, 1, 2}));
  std::ostringstream out;
  write_csv(out, ds, opt);
  EXPECT_EQ(parse_csv(out.str(), opt), ds);
}

TEST(Csv, Errors) {
  EXPECT_THROW(parse_csv("a,b\n1,2\n"), ParseError);
  EXPECT_THROW(parse_csv("a,label\n1,2,3\n"), ParseError);
  EXPECT_THROW(parse_csv("a,label\nfoo,1\n"), ParseError);
  EXPECT_THROW(parse_csv("a,label\n1,0\n"), ParseError);
  EXPECT_THROW(parse_csv("a,label\n1,1.5\n"), ParseError);
  EXPECT_THROW(parse_csv("a,label\n"), ParseError);
}

TEST(LabelNoise, ZeroAndFullRate) {
  const auto ds = make_dataset({50, 50});
  EXPECT_EQ(inject_label_noise(ds, 0.0, false, 3).data, ds);
  const auto all = inject_label_noise(ds, 1.0, false, 3);
  for (std::size_t i = 0; i < ds.rows(); ++i) EXPECT_EQ(all.data.labels[i], 3 - ds.labels[i]);
  EXPECT_EQ(all.affected_rows.size(), ds.rows());
}

TEST(LabelNoise, FlippedFractionConcentrates) {
  const auto ds = make_dataset({5000, 5000});
  const auto r = inject_label_noise(ds, 0.3, false, 42);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < ds.rows(); ++i) flipped += r.data.labels[i] != ds.labels[i];
  const double frac = static_cast<double>(flipped) / 10000.0;
  EXPECT_GE(frac, 0.27);
  EXPECT_LE(frac, 0.33);
  EXPECT_EQ(flipped, r.affected_rows.size());
  EXPECT_EQ(r.data.features, ds.features);
}

TEST(LabelNoise, UniformOverOtherClasses) {
  const auto ds = make_dataset({3000, 3000, 3000});
  const auto r = inject_label_noise(ds, 1.0, false, 5);
  std::map<std::pair<int, int>, int> pairs;
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    ASSERT_NE(r.data.labels[i], ds.labels[i]);
    ++pairs[{ds.labels[i], r.data.labels[i]}];
  }
  for (auto& [k, v] : pairs) EXPECT_NEAR(v, 1500, 150) << k.first << "->" << k.second;
}

TEST(LabelNoise, StructuredMapAndErrors) {
  const auto ds = make_dataset({100, 100, 100});
  const auto r = inject_label_noise(ds, 1.0, true, 5, {{1, 3}});
  for (std::size_t i = 0; i < ds.rows(); ++i) EXPECT_EQ(r.data.labels[i], ds.labels[i] == 1 ? 3 : ds.labels[i]);
  EXPECT_THROW(inject_label_noise(ds, 0.5, true, 5, {{2, 2}}), InvalidArgument);
  EXPECT_THROW(inject_label_noise(ds, 0.5, true, 5, {}), InvalidArgument);
  EXPECT_THROW(inject_label_noise(make_dataset({10}), 0.5, false, 5), InvalidArgument);
  EXPECT_THROW(inject_label_noise(ds, 1.5, false, 5), InvalidArgument);
}

TEST(ClassImbalance, FloorRule) {
  const auto ds = make_dataset({100, 100});
  EXPECT_EQ(inject_class_imbalance(ds, 1.0, 1).data, ds);
  EXPECT_EQ(inject_class_imbalance(ds, 3.0, 1).data.class_counts(), (std::vector<std::size_t>{100, 33}));
  EXPECT_EQ(inject_class_imbalance(ds, 9.0, 1).data.class_counts(), (std::vector<std::size_t>{100, 11}));
  EXPECT_THROW(inject_class_imbalance(ds, 101.0, 1), InvalidArgument);
}

TEST(ClassImbalance, OnlyDeletesRowsAndKeepsOrder) {
  const auto ds = make_dataset({120, 80, 60}, 3, 9);
  const auto r = inject_class_imbalance(ds, 4.0, 17);
  EXPECT_EQ(r.data.class_counts(), (std::vector<std::size_t>{120, 30, 30}));
  // Every surviving row exists in the original, in the original order.
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < r.data.rows(); ++i) {
    while (cursor < ds.rows() && !(ds.features.row(static_cast<Eigen::Index>(cursor)) ==
                                       r.data.features.row(static_cast<Eigen::Index>(i)) &&
                                   ds.labels[cursor] == r.data.labels[i]))
      ++cursor;
    ASSERT_LT(cursor, ds.rows());
    ++cursor;
  }
  EXPECT_EQ(r.affected_rows.size(), ds.rows() - r.data.rows());
}

TEST(ClassImbalance, RatioWithinOneSampleAndNeverBelowOriginal) {
  for (double tau : {1.0, 1.5, 2.0, 3.0, 4.7, 9.0, 20.0}) {
    const auto ds = make_dataset({100, 90});
    const double original = 100.0 / 90.0;
    const auto r = inject_class_imbalance(ds, tau, 3);
    const auto c = r.data.class_counts();
    const double ratio = static_cast<double>(c[0]) / static_cast<double>(c[1]);
    if (tau < original) {
      EXPECT_EQ(r.data, ds);
      EXPECT_FALSE(r.notices.empty());
      continue;
    }
    EXPECT_GE(ratio, original);
    EXPECT_GE(ratio, tau - 1e-12);
    EXPECT_LE(static_cast<double>(c[0]) / static_cast<double>(c[1] + 1), tau) << tau;
  }
}

TEST(ConceptDrift, SplitsAndFlips) {
  const auto ds = make_dataset({200, 200});
  const auto none = inject_concept_drift(ds, 0.0, std::nullopt, 1);
  EXPECT_EQ(none.test->rows(), 0u);
  EXPECT_EQ(none.data.rows(), ds.rows());

  const auto rule = FlipRule::parse("x1>0");
  const auto r = inject_concept_drift(ds, 0.25, rule, 7);
  ASSERT_EQ(r.test->rows(), 100u);
  EXPECT_EQ(r.data.rows(), 300u);
  for (std::size_t i = 0; i < r.test->rows(); ++i) {
    const bool region = r.test->features(static_cast<Eigen::Index>(i), 0) > 0.0;
    // Find the source row to compare labels.
    std::size_t src = ds.rows();
    for (std::size_t k = 0; k < ds.rows(); ++k)
      if (ds.features.row(static_cast<Eigen::Index>(k)) == r.test->features.row(static_cast<Eigen::Index>(i))) src = k;
    ASSERT_LT(src, ds.rows());
    EXPECT_EQ(r.test->labels[i], region ? 3 - ds.labels[src] : ds.labels[src]);
  }
  for (std::size_t i = 0; i < r.data.rows(); ++i) {
    std::size_t src = ds.rows();
    for (std::size_t k = 0; k < ds.rows(); ++k)
      if (ds.features.row(static_cast<Eigen::Index>(k)) == r.data.features.row(static_cast<Eigen::Index>(i))) src = k;
    EXPECT_EQ(r.data.labels[i], ds.labels[src]);
  }
}

TEST(ConceptDrift, ChronologicalOrdering) {
  auto ds = make_dataset({50, 50});
  ds.timestamps.emplace();
  Rng rng(4);
  for (std::size_t i = 0; i < ds.rows(); ++i) ds.timestamps->push_back(rng.uniform(0, 1000));
  const auto r = inject_concept_drift(ds, 0.3, std::nullopt, 1, DriftMode::chronological);
  EXPECT_EQ(r.test->rows(), 30u);
  const double train_max = *std::max_element(r.data.timestamps->begin(), r.data.timestamps->end());
  const double test_min = *std::min_element(r.test->timestamps->begin(), r.test->timestamps->end());
  EXPECT_LE(train_max, test_min);
  EXPECT_THROW(inject_concept_drift(make_dataset({5, 5}), 0.3, std::nullopt, 1, DriftMode::chronological),
               InvalidArgument);
}

TEST(FlipRules, ParseAndRotate) {
  const auto r = FlipRule::parse(" x2 <= -1.5 ");
  EXPECT_EQ(r.feature, 1u);
  EXPECT_EQ(r.op, FlipRule::Op::le);
  EXPECT_DOUBLE_EQ(r.threshold, -1.5);
  EXPECT_EQ(FlipRule::parse(r.str()).str(), r.str());
  EXPECT_THROW(FlipRule::parse("y1>0"), InvalidArgument);
  EXPECT_THROW(FlipRule::parse("x0>0"), InvalidArgument);
  EXPECT_THROW(FlipRule::parse("x1=0"), InvalidArgument);
  EXPECT_EQ(flipped_label(1, 2), 2);
  EXPECT_EQ(flipped_label(2, 2), 1);
  EXPECT_EQ(flipped_label(3, 3), 1);
  EXPECT_EQ(flipped_label(1, 3), 2);
}

TEST(Ood, FractionShiftAndLabels) {
  const auto ds = make_dataset({500, 500}, 3);
  EXPECT_EQ(inject_ood(ds, 0.0, {0, 0, 0}, 1).data, ds);
  const auto r = inject_ood(ds, 0.2, {10, 10, 10}, 2);
  ASSERT_EQ(r.affected_rows.size(), 200u);
  EXPECT_EQ(r.data.labels, ds.labels);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(3);
  for (auto i : r.affected_rows) mean += r.data.features.row(static_cast<Eigen::Index>(i));
  mean /= 200.0;
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(mean(j), 10.0, 0.25);
  EXPECT_THROW(inject_ood(ds, 0.2, {1, 2}, 2), InvalidArgument);
  EXPECT_THROW(inject_ood(ds, 1.2, {1, 2, 3}, 2), InvalidArgument);
}

TEST(Ood, FullFractionZeroShiftResamples) {
  const auto ds = make_dataset({200, 200}, 2);
  const auto r = inject_ood(ds, 1.0, {0, 0}, 8);
  for (Eigen::Index i = 0; i < r.data.features.rows(); ++i) {
    bool found = false;
    for (Eigen::Index k = 0; k < ds.features.rows() && !found; ++k) found = ds.features.row(k) == r.data.features.row(i);
    EXPECT_TRUE(found);
  }
}

TEST(Injectors, DeterministicAndSeedSensitive) {
  const auto ds = make_dataset({100, 100}, 2);
  const auto rule = FlipRule::parse("x1>0");
  EXPECT_EQ(inject_label_noise(ds, 0.3, false, 1).data, inject_label_noise(ds, 0.3, false, 1).data);
  EXPECT_NE(inject_label_noise(ds, 0.3, false, 1).data, inject_label_noise(ds, 0.3, false, 2).data);
  EXPECT_EQ(inject_class_imbalance(ds, 3, 1).data, inject_class_imbalance(ds, 3, 1).data);
  EXPECT_NE(inject_class_imbalance(ds, 3, 1).data, inject_class_imbalance(ds, 3, 2).data);
  EXPECT_EQ(inject_concept_drift(ds, 0.3, rule, 1).test, inject_concept_drift(ds, 0.3, rule, 1).test);
  EXPECT_NE(inject_concept_drift(ds, 0.3, rule, 1).test, inject_concept_drift(ds, 0.3, rule, 2).test);
  EXPECT_EQ(inject_ood(ds, 0.3, {1, 1}, 1).data, inject_ood(ds, 0.3, {1, 1}, 1).data);
  EXPECT_NE(inject_ood(ds, 0.3, {1, 1}, 1).data, inject_ood(ds, 0.3, {1, 1}, 2).data);
}

TEST(Preprocessing, StandardizeMinmaxDedup) {
  Dataset ds;
  ds.features.resize(3, 2);
  ds.features << 1, 5, 2, 5, 3, 5;
  ds.labels = {1, 1, 2};
  ds.column_names = {"a", "c"};
  ds.num_classes = 2;
  const auto s = apply_preprocessing(ds, {PreprocessOp::standardize});
  const double mean = s.data.features.col(0).mean();
  const double var = (s.data.features.col(0).array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(s.data.features(0, 1), 0.0);
  ASSERT_EQ(s.notices.size(), 1u);

  const auto m = apply_preprocessing(ds, {PreprocessOp::minmax_scale});
  EXPECT_DOUBLE_EQ(m.data.features(1, 0), 0.5);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(m.data.features(i, 1), 0.0);
  EXPECT_EQ(m.notices.size(), 1u);

  Dataset dup;
  dup.features.resize(3, 1);
  dup.features << 7, 7, 8;
  dup.labels = {1, 1, 1};
  dup.column_names = {"r"};
  dup.num_classes = 1;
  const auto d = apply_preprocessing(dup, {PreprocessOp::dedup});
  ASSERT_EQ(d.data.rows(), 2u);
  EXPECT_DOUBLE_EQ(d.data.features(0, 0), 7.0);
  EXPECT_DOUBLE_EQ(d.data.features(1, 0), 8.0);
}

TEST(Preprocessing, CanonicalOrderImputesBeforeScaling) {
  const auto ds = parse_csv("a,label\n1,1\n,1\n3,2\n1,1\n");
  const auto r = apply_preprocessing(ds, {PreprocessOp::impute_missing, PreprocessOp::dedup, PreprocessOp::minmax_scale});
  // dedup drops the repeated (1,1); impute fills with mean(1,3)=2; minmax maps to 0, 0.5, 1.
  ASSERT_EQ(r.data.rows(), 3u);
  EXPECT_DOUBLE_EQ(r.data.features(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(r.data.features(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.data.features(2, 0), 1.0);
}

TEST(BugSpecs, JsonRoundTripAndFieldExclusivity) {
  const auto s = bug_spec_from_json(nlohmann::json::parse(R"({"kind":"concept_drift","drift_fraction":0.3,
      "flip_rule":"x1>0","seed":9})"));
  EXPECT_EQ(s.kind, BugKind::concept_drift);
  EXPECT_EQ(bug_spec_to_json(bug_spec_from_json(bug_spec_to_json(s))), bug_spec_to_json(s));
  EXPECT_THROW(bug_spec_from_json(nlohmann::json::parse(R"({"kind":"label_noise","eta":0.3,"tau":3})")),
               InvalidArgument);
  EXPECT_THROW(bug_spec_from_json(nlohmann::json::parse(R"({"kind":"class_imbalance"})")), InvalidArgument);
  EXPECT_THROW(bug_spec_from_json(nlohmann::json::parse(R"({"kind":"ood","ood_fraction":0.1,"bogus":1})")),
               InvalidArgument);
  const auto omit = bug_spec_from_json(nlohmann::json::parse(R"({"kind":"omit_preprocessing",
      "omitted_ops":["standardize","minmax_scale"]})"));
  EXPECT_EQ(remaining_ops(omit.omitted_ops),
            (std::set<PreprocessOp>{PreprocessOp::dedup, PreprocessOp::impute_missing}));
}

TEST(Preprocessing, FittedMapReproducesTrainingTransform) {
  auto ds = make_dataset({40, 40}, 3, 11);
  ds.features.col(1) *= 1000.0;
  ds.features(3, 2) = std::nan("");
  const auto r = apply_preprocessing(
      ds, {PreprocessOp::impute_missing, PreprocessOp::standardize, PreprocessOp::minmax_scale});
  const auto again = r.fitted.apply(ds);
  for (Eigen::Index i = 0; i < ds.features.size(); ++i)
    EXPECT_NEAR(again.features.data()[i], r.data.features.data()[i], 1e-12);
}
