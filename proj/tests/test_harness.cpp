#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "chainod/chainod.hpp"

using namespace chainod;

namespace {

const std::filesystem::path kToy = std::filesystem::path(CHAINOD_SCENARIO_DIR) / "toy.scenario";

ScenarioConfig toy() { return load_scenario(kToy); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("chainod_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

const char* kMinimal = R"(
name: tiny
network: {preset: toy}
legs:
  - {name: HW, total: 100, ods: [{od: 1-3, share: 1.0}]}
  - {name: WH, total: 100, feeds: [HW], schedule: {preferred_arrival: 1080}, ods: [{od: 3-1, share: 1.0}]}
)";

}  // namespace

TEST(Scenario, ToyFileParsesAndValidates) {
  const ScenarioConfig cfg = toy();
  EXPECT_EQ(cfg.name, "toy");
  EXPECT_EQ(cfg.legs.size(), 5u);
  EXPECT_EQ(cfg.grid.n_intervals, 96);
  EXPECT_EQ(cfg.cutoff_interval(), 48);
  EXPECT_EQ(cfg.profile_ods.size(), 4u);
  EXPECT_TRUE(cfg.validate().empty());
  EXPECT_EQ(cfg.chain().topological_order().front(), "HW_home");
}

TEST(Scenario, MinimalDocumentUsesDefaults) {
  const ScenarioConfig cfg = parse_scenario(kMinimal);
  EXPECT_EQ(cfg.grid.interval_length, 15.0);
  EXPECT_EQ(cfg.perturbation.scale, 0.30);
  EXPECT_EQ(cfg.noise.kf_r, 0.10);
  EXPECT_EQ(cfg.legs[1].schedule.preferred_arrival, 1080.0);
  EXPECT_EQ(cfg.legs[0].schedule.preferred_arrival, 510.0);
  EXPECT_TRUE(cfg.validate().empty());
}

TEST(Scenario, UnknownKeysAreRejected) {
  EXPECT_THROW(parse_scenario(std::string(kMinimal) + "bogus: 1\n"), ConfigError);
  EXPECT_THROW(parse_scenario(std::string(kMinimal) + "noise: {kf_qq: 1}\n"), ConfigError);
  EXPECT_THROW(parse_scenario("legs: []\n"), ConfigError);
  EXPECT_THROW(parse_scenario("[1, 2]"), ConfigError);
}

TEST(Scenario, MissingFileIsIoError) { EXPECT_THROW(load_scenario("/nonexistent/x.scenario"), IoError); }

TEST(Scenario, ValidationCollectsEveryProblem) {
  ScenarioConfig cfg = parse_scenario(kMinimal);
  cfg.legs[0].shares.push_back({{2, 3}, 0.5});
  cfg.legs[1].feeds = {"nope"};
  cfg.estimation.cutoff = 5000;
  cfg.models.push_back("magic");
  const auto problems = cfg.validate();
  auto has = [&](const std::string& needle) {
    for (const auto& p : problems)
      if (p.find(needle) != std::string::npos) return true;
    return false;
  };
  EXPECT_TRUE(has("shares must sum to 1"));
  EXPECT_TRUE(has("unknown leg 'nope'"));
  EXPECT_TRUE(has("cutoff"));
  EXPECT_TRUE(has("magic"));
  EXPECT_THROW(run_experiment(cfg), ConfigError);
}

TEST(Scenario, ModelKeysRoundTrip) {
  for (auto m : {ModelKind::seed, ModelKind::kf, ModelKind::pkf, ModelKind::spkf})
    EXPECT_EQ(model_from_key(model_key(m)), m);
  EXPECT_THROW(model_from_key("ukf"), ConfigError);
}

TEST(Truth, LegTotalsAndUniformInflation) {
  const ScenarioConfig cfg = toy();
  const TruthAndHistory w = generate_truth_and_history(cfg);
  EXPECT_NEAR(w.truth.legs[0].od_flows.sum() + w.truth.legs[2].od_flows.sum(), 26000.0, 1e-9);
  EXPECT_NEAR(w.truth.legs[4].od_flows.sum(), 6000.0, 1e-9);
  for (std::size_t p = 0; p < w.truth.legs.size(); ++p)
    for (Eigen::Index i = 0; i < w.truth.legs[p].od_flows.size(); ++i)
      EXPECT_NEAR(w.historical.legs[p].od_flows[i], 1.3 * w.truth.legs[p].od_flows[i], 1e-9);
  EXPECT_NEAR(w.truth.demand.x.sum(), 58000.0, 1e-6);
  EXPECT_NEAR(w.historical.demand.x.sum(), 1.3 * 58000.0, 1e-6);
}

TEST(Truth, ProfilesAreDistributions) {
  const TruthAndHistory w = generate_truth_and_history(toy());
  for (std::size_t p = 0; p < w.truth.profiles.size(); ++p)
    for (std::size_t i : w.truth.legs[p].members)
      EXPECT_NEAR(w.truth.profiles[p].row(static_cast<Eigen::Index>(i)).sum(), 1.0, 1e-12);
}

TEST(Truth, NoPerturbationGivesNoImprovement) {
  ScenarioConfig cfg = toy();
  cfg.perturbation.scale = 0.0;
  cfg.noise.measurement = 0.0;
  const TruthAndHistory w = generate_truth_and_history(cfg);
  EXPECT_EQ(w.truth.demand.x, w.historical.demand.x);
  cfg.models = {"seed", "kf"};
  const ExperimentReport r = run_experiment(cfg);
  ASSERT_NE(r.row(ModelKind::seed), nullptr);
  EXPECT_EQ(r.row(ModelKind::seed)->rmse_od, 0.0);
  for (const auto& row : r.rows) {
    EXPECT_NEAR(row.rmse_od, 0.0, 1e-9);
    EXPECT_NEAR(row.rmse_link, 0.0, 1e-9);
    EXPECT_FALSE(row.impr_od_pct.has_value());
    EXPECT_FALSE(row.impr_link_pct.has_value());
  }
  EXPECT_NE(report_csv(r).find("n/a,n/a"), std::string::npos);
}

TEST(Truth, NoisyPerturbationIsSeeded) {
  ScenarioConfig cfg = toy();
  cfg.perturbation.mode = PerturbationMode::scale_plus_noise;
  cfg.perturbation.noise = 0.2;
  const auto a = generate_truth_and_history(cfg).perturbation_factors;
  const auto b = generate_truth_and_history(cfg).perturbation_factors;
  EXPECT_EQ(a, b);
  EXPECT_GE(a.minCoeff(), 1.3 * 0.8);
  EXPECT_LT(a.maxCoeff(), 1.3 * 1.2);
  cfg.seed = 2;
  EXPECT_NE(generate_truth_and_history(cfg).perturbation_factors, a);
  cfg.perturbation.seed = 1;
  EXPECT_EQ(generate_truth_and_history(cfg).perturbation_factors, a);
}

TEST(Measurements, NoiseIsSeededAndNonNegative) {
  const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(3, 50, 10.0);
  EXPECT_EQ(observe_counts(y, 0.0, 1), y);
  const Eigen::MatrixXd a = observe_counts(y, 0.5, 7);
  EXPECT_EQ(a, observe_counts(y, 0.5, 7));
  EXPECT_NE(a, observe_counts(y, 0.5, 8));
  EXPECT_GE(a.minCoeff(), 0.0);
}

TEST(Rmse, Values) {
  const std::vector<double> a = {1, 2, 3}, b = {1, 2, 3};
  EXPECT_EQ(rmse(a, b), 0.0);
  const std::vector<double> c = {0, 0}, d = {3, 4};
  EXPECT_NEAR(rmse(c, d), 3.5355339059327378, 1e-15);
  EXPECT_EQ(rmse(c, d), rmse(d, c));
  const std::vector<double> d3 = {9, 12};
  EXPECT_NEAR(rmse(c, d3), 3.0 * rmse(c, d), 1e-14);
  EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), DomainError);
  EXPECT_THROW(rmse(a, c), ConfigError);
}

class ToyExperiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { report_ = new ExperimentReport(run_experiment(toy())); }
  static void TearDownTestSuite() {
    delete report_;
    report_ = nullptr;
  }
  static ExperimentReport* report_;
};

ExperimentReport* ToyExperiment::report_ = nullptr;

TEST_F(ToyExperiment, FourRowsInOrder) {
  ASSERT_EQ(report_->rows.size(), 4u);
  EXPECT_EQ(report_->rows[0].model, ModelKind::seed);
  EXPECT_EQ(report_->rows[3].model, ModelKind::spkf);
  for (const auto& r : report_->rows) EXPECT_TRUE(r.ok) << r.error;
  EXPECT_EQ(report_->cutoff, 48);
}

TEST_F(ToyExperiment, ImprovementsMatchRmse) {
  const ModelRow* seed = report_->row(ModelKind::seed);
  for (const auto& r : report_->rows) {
    ASSERT_TRUE(r.impr_od_pct && r.impr_link_pct);
    EXPECT_NEAR(*r.impr_od_pct, 100.0 * (seed->rmse_od - r.rmse_od) / seed->rmse_od, 1e-12);
    EXPECT_NEAR(*r.impr_link_pct, 100.0 * (seed->rmse_link - r.rmse_link) / seed->rmse_link, 1e-12);
  }
  EXPECT_EQ(*seed->impr_od_pct, 0.0);
}

TEST_F(ToyExperiment, ChainModelsPredictWithoutLoading) {
  for (auto m : {ModelKind::pkf, ModelKind::spkf}) {
    const ModelRow* r = report_->row(m);
    ASSERT_TRUE(r->prediction.has_value());
    EXPECT_EQ(r->prediction->loader_calls, 0u);
  }
}

TEST_F(ToyExperiment, CovariancesStayHealthy) {
  EXPECT_LE(report_->diagnostics.worst_symmetry_error, 1e-10);
  EXPECT_GE(report_->diagnostics.worst_relative_min_eigenvalue, -1e-8);
}

TEST_F(ToyExperiment, RerunIsBitIdentical) {
  const ExperimentReport again = run_experiment(toy());
  EXPECT_EQ(report_csv(again), report_csv(*report_));
  EXPECT_EQ(report_json(again).dump(), report_json(*report_).dump());
}

TEST_F(ToyExperiment, CsvLayout) {
  std::istringstream csv(report_csv(*report_));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "model,rmse_od,rmse_link,impr_od_pct,impr_link_pct");
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("Seed,", 0), 0u);
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST_F(ToyExperiment, EmitWritesAndReplacesFiles) {
  const auto dir = scratch_dir("emit");
  EmitOptions opts;
  opts.profile_ods = {{4, 1}, {1, 3}};
  emit_report(*report_, dir, opts);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "profiles" / "4-1.csv"));
  EXPECT_FALSE(std::filesystem::exists(dir / "profiles" / "5-1.csv"));
  const std::string first = slurp(dir / "report.csv");
  emit_report(*report_, dir, opts);
  EXPECT_EQ(slurp(dir / "report.csv"), first);
  const auto header = slurp(dir / "profiles" / "4-1.csv").substr(0, 40);
  EXPECT_EQ(header.rfind("interval,true,historical,kf,pkf,spkf", 0), 0u);
  const auto json = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(json["models"].size(), 4u);
  EXPECT_EQ(json["rng"], "mt19937_64");
  std::filesystem::remove_all(dir);
}

TEST_F(ToyExperiment, EmitIntoUnwritablePathIsIoError) {
  const auto dir = scratch_dir("blocked");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(emit_report(*report_, dir / "file" / "out"), IoError);
  EmitOptions opts;
  opts.profile_ods = {{9, 9}};
  EXPECT_THROW(emit_report(*report_, dir / "ok", opts), ConfigError);
  std::filesystem::remove_all(dir);
}
