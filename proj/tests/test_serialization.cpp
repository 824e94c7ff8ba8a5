#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "fedmsa/datagen.hpp"
#include "fedmsa/experiment.hpp"
#include "fedmsa/serialization.hpp"

using namespace fedmsa;

TEST(Doubles, ShortestFormRoundTripsBitwise) {
  Stream rng(1, 1);
  std::vector<double> values{0.0, -0.0, 1.0, 0.1, 1e-310, 1.7976931348623157e308, -2.5e-7};
  for (int i = 0; i < 1000; ++i) values.push_back(rng.normal() * std::pow(10.0, rng.normal() * 5));
  for (double v : values) {
    const double back = parse_double(format_double(v));
    EXPECT_EQ(std::signbit(back), std::signbit(v));
    EXPECT_EQ(back, v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(parse_double("+2.5"), 2.5);
}

TEST(Doubles, RejectsGarbage) {
  EXPECT_THROW(parse_double(""), ConfigError);
  EXPECT_THROW(parse_double("1.5x"), ConfigError);
  EXPECT_THROW(parse_double("abc"), ConfigError);
}

TEST(MatrixJson, RoundTripAndShapeChecks) {
  const Matrix m{{1.5, -2.0, 3.0}, {0.25, 0.0, 1e-9}};
  EXPECT_EQ(matrix_from_json(to_json(m), 2, 3), m);
  EXPECT_THROW(matrix_from_json(to_json(m), 3, 2), ConfigError);
  EXPECT_THROW(matrix_from_json(Json::parse("[[1, 2], [3, \"x\"]]"), 2, 2), ConfigError);
  EXPECT_THROW(vector_from_json(Json::parse("{\"a\": 1}")), ConfigError);
}

TEST(BilevelJson, GeneratedInstanceRoundTripsExactly) {
  BilevelGenOptions o;
  o.M = 3;
  o.d1 = 2;
  o.d2 = 3;
  o.tau = 0.2;
  o.sigma_f = 0.1;
  const auto inst = gen_quadratic_bilevel(o);
  // Through text, as the CLI does.
  const auto back = bilevel_from_json(Json::parse(to_json(inst).dump()));
  ASSERT_EQ(back.clients.size(), inst.clients.size());
  for (std::size_t m = 0; m < inst.clients.size(); ++m) {
    EXPECT_EQ(back.clients[m].A, inst.clients[m].A);
    EXPECT_EQ(back.clients[m].B, inst.clients[m].B);
    EXPECT_EQ(back.clients[m].c, inst.clients[m].c);
    EXPECT_EQ(back.clients[m].C, inst.clients[m].C);
    EXPECT_EQ(back.clients[m].t, inst.clients[m].t);
    EXPECT_EQ(back.clients[m].D, inst.clients[m].D);
  }
  EXPECT_EQ(back.sigma_f, inst.sigma_f);
  EXPECT_EQ(back.heterogeneity, inst.heterogeneity);
  EXPECT_EQ(back.x0, inst.x0);
}

TEST(BilevelJson, InvalidInstancesAreConfigOrConstructionErrors) {
  auto j = to_json(toy_bilevel());
  j.erase("clients");
  EXPECT_THROW(bilevel_from_json(j), ConfigError);
  auto k = to_json(toy_bilevel());
  k["d1"] = "one";
  EXPECT_THROW(bilevel_from_json(k), ConfigError);
  auto bad = to_json(toy_bilevel());
  bad["clients"][0]["A"] = Json::parse("[[-1.0]]");
  EXPECT_THROW(bilevel_from_json(bad), ConstructionError);
}

TEST(PartitionJson, RoundTrip) {
  const std::vector<std::vector<std::size_t>> p{{0, 3, 4}, {1, 2}, {5}};
  EXPECT_EQ(partition_from_json(Json::parse(to_json(p).dump())), p);
  EXPECT_THROW(partition_from_json(Json::parse("[[0, -1]]")), ConfigError);
}

TEST(DatasetCsv, RoundTripsBitwise) {
  const auto data = gen_risk_averse_dataset(3, 50, 1, 2);
  std::stringstream ss;
  write_dataset_csv(ss, data.a, data.b);
  const std::string text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "a_1,a_2,a_3,b");
  std::vector<Vector> a;
  std::vector<double> b;
  read_dataset_csv(ss, a, b);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a[i], data.a[i]);
    EXPECT_EQ(b[i], data.b[i]);
  }
}

TEST(DatasetCsv, RejectsRaggedRows) {
  std::stringstream ss("a_1,a_2,b\n1,2,3\n1,2\n");
  std::vector<Vector> a;
  std::vector<double> b;
  EXPECT_THROW(read_dataset_csv(ss, a, b), ConfigError);
}

TEST(ExperimentJson, EveryProblemKindRoundTrips) {
  ExperimentConfig toy;
  toy.problem.toy_clients = 3;
  toy.problem.toy_x0 = -0.3;
  toy.hyper.alpha = 0.37;
  toy.hyper.report_mode = ReportMode::kUniformRandomIterate;

  ExperimentConfig quad;
  quad.problem.kind = "quadratic-bilevel";
  quad.problem.bilevel.tau = 0.15;
  quad.problem.bilevel.pure_indirect = true;
  quad.algorithms = {"fedmsa", "frozen-indirect"};
  quad.k_sweep = {1, 4, 12};
  quad.hyper.step_scaling = StepScaling::kPerRound;

  ExperimentConfig risk;
  risk.problem.kind = "risk-averse";
  risk.problem.risk.q = 0.3;
  risk.problem.risk.lambda = 0.0;
  risk.algorithms = {"centralized"};
  risk.hyper.betas = {0.5, 0.25};
  risk.metric_every = 10;

  ExperimentConfig file;
  file.problem.kind = "bilevel-file";
  file.problem.path = "inst.json";
  file.output_dir = "somewhere";

  for (const auto& cfg : {toy, quad, risk, file}) {
    const auto back = parse_experiment(Json::parse(experiment_to_json(cfg).dump()));
    EXPECT_EQ(back, cfg) << experiment_to_json(cfg).dump();
  }
}

TEST(ExperimentJson, StrictFieldChecking) {
  const auto parse = [](const char* text) { return parse_experiment(Json::parse(text)); };
  EXPECT_NO_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}})"));
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "colour": 1})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel", "M": 3}})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "nope"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "hyper": {"alpha": "big"}})"),
               ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "hyper": {"K": 0}})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "hyper": {"rho": 2}})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "algorithm": "sgd"})"), ConfigError);
  EXPECT_THROW(
      parse(R"({"problem": {"kind": "toy-bilevel"}, "algorithm": "fedmsa", "algorithms": ["fedmsa"]})"),
      ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "hyper": {"R": -1}})"), ConfigError);
  EXPECT_THROW(parse(R"({"problem": {"kind": "toy-bilevel"}, "hyper": {"report_mode": "best"}})"),
               ConfigError);
  EXPECT_THROW(parse(R"({"hyper": {}})"), ConfigError);
}
