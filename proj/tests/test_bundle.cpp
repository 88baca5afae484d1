#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <doctest.h>

#include "smds/bundle.hpp"
#include "smds/rng.hpp"
#include "smds/simulate.hpp"

using smds::Mat;
using smds::MultiscaleSeries;
using smds::Rng;
using smds::SwitchingModel;
using smds::Vec;

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "smds_bundle_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

MultiscaleSeries sample_series(int T, smds::BehaviorMap* bmap_out = nullptr) {
  smds::SimConfig sc;
  sc.d = 4;
  sc.C = 3;
  sc.F = 2;
  sc.M = 2;
  sc.shared_mode_pairs = 2;
  sc.spike_only_pairs = 0;
  sc.field_only_pairs = 0;
  sc.field_period_steps = 3;
  sc.behavior_dims = 2;
  Rng rng(71);
  SwitchingModel model = smds::random_switching_model(sc, rng);
  Mat stat_cov = smds::stationary_cov_of(model.regimes[0]);
  smds::BehaviorMap bmap = smds::random_behavior_map(sc, stat_cov, rng);
  if (bmap_out) *bmap_out = bmap;
  return smds::simulate_series(model, T, rng, &bmap);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void rewrite_line(const fs::path& path, int line_index,
                  const std::string& replacement) {
  std::string text = slurp(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  lines[line_index] = replacement;
  std::ofstream out(path, std::ios::binary);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

TEST_CASE("bundle round trip preserves every block") {
  fs::path dir = fresh_dir("roundtrip");
  MultiscaleSeries series = sample_series(40);
  smds::write_bundle(dir.string(), series, 2);

  smds::BundleMeta meta = smds::read_bundle_meta(dir.string());
  CHECK(meta.T == 40);
  CHECK(meta.C == 3);
  CHECK(meta.F == 2);
  CHECK(meta.B == 2);
  CHECK(meta.M_true == 2);
  CHECK(meta.dt_ms == 10.0);
  CHECK(meta.field_period_steps == 3);

  MultiscaleSeries back = smds::read_bundle(dir.string());
  CHECK(back.spikes == series.spikes);
  CHECK(back.field_mask == series.field_mask);
  for (int t = 0; t < 40; ++t) {
    if (!series.field_mask[t]) continue;
    for (int f = 0; f < 2; ++f) {
      CHECK(back.fields(t, f) == series.fields(t, f));
    }
  }
  CHECK((back.behavior - series.behavior).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.regimes == series.regimes);
  CHECK(back.latents.rows() == 41);
  CHECK((back.latents - series.latents).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.dt_ms == series.dt_ms);
  CHECK(back.field_period_steps == 3);
}

TEST_CASE("writing the same series twice is byte identical") {
  fs::path a = fresh_dir("bytes_a");
  fs::path b = fresh_dir("bytes_b");
  MultiscaleSeries series = sample_series(25);
  smds::write_bundle(a.string(), series, 2);
  smds::write_bundle(b.string(), series, 2);
  for (const char* name : {"meta.json", "spikes.csv", "fields.csv",
                           "behavior.csv", "regimes.csv", "latents.csv"}) {
    CHECK(slurp(a / name) == slurp(b / name));
  }
}

TEST_CASE("optional blocks produce no files and read back empty") {
  fs::path dir = fresh_dir("optional");
  MultiscaleSeries series = sample_series(12);
  series.behavior = Mat();
  series.regimes.clear();
  series.latents = Mat();
  smds::write_bundle(dir.string(), series);

  CHECK(!fs::exists(dir / "behavior.csv"));
  CHECK(!fs::exists(dir / "regimes.csv"));
  CHECK(!fs::exists(dir / "latents.csv"));
  std::string meta_text = slurp(dir / "meta.json");
  CHECK(meta_text.find("M_true") == std::string::npos);

  MultiscaleSeries back = smds::read_bundle(dir.string());
  CHECK(back.behavior.size() == 0);
  CHECK(back.regimes.empty());
  CHECK(back.latents.size() == 0);
  CHECK(back.spikes == series.spikes);
  CHECK(smds::read_bundle_meta(dir.string()).M_true == 0);
}

TEST_CASE("unobserved field rows are written as empty cells") {
  fs::path dir = fresh_dir("mask");
  MultiscaleSeries series = sample_series(9);
  smds::write_bundle(dir.string(), series);
  std::string text = slurp(dir / "fields.csv");
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  REQUIRE(lines.size() == 9);
  for (int t = 0; t < 9; ++t) {
    if (series.field_mask[t]) {
      CHECK(lines[t].find_first_not_of(',') != std::string::npos);
    } else {
      CHECK(lines[t] == ",");
    }
  }
}

TEST_CASE("corrupt bundles are rejected with location info") {
  fs::path dir = fresh_dir("corrupt");
  MultiscaleSeries series = sample_series(10);
  smds::write_bundle(dir.string(), series);

  SUBCASE("partially observed field row") {
    int masked = -1;
    for (int t = 0; t < 10; ++t) {
      if (series.field_mask[t]) masked = t;
    }
    REQUIRE(masked >= 0);
    rewrite_line(dir / "fields.csv", masked, "1.5,");
    CHECK_THROWS_AS(smds::read_bundle(dir.string()), smds::IoError);
  }
  SUBCASE("bad numeric cell") {
    rewrite_line(dir / "spikes.csv", 4, "1,x,0");
    CHECK_THROWS_AS(smds::read_bundle(dir.string()), smds::IoError);
  }
  SUBCASE("row count mismatch") {
    std::string text = slurp(dir / "regimes.csv");
    std::ofstream out(dir / "regimes.csv", std::ios::binary);
    out << text.substr(0, text.find('\n') + 1);
    out.close();
    CHECK_THROWS_AS(smds::read_bundle(dir.string()), smds::IoError);
  }
  SUBCASE("unsupported schema version") {
    std::string meta = slurp(dir / "meta.json");
    std::size_t pos = meta.find("\"schema_version\": 1");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 19, "\"schema_version\": 2");
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << meta;
    out.close();
    CHECK_THROWS_AS(smds::read_bundle_meta(dir.string()), smds::IoError);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(smds::read_bundle((dir / "nope").string()),
                    smds::IoError);
  }
}

TEST_CASE("empty behavior cells round trip as missing values") {
  fs::path dir = fresh_dir("nan");
  MultiscaleSeries series = sample_series(6);
  series.behavior(3, 1) = std::numeric_limits<double>::quiet_NaN();
  smds::write_bundle(dir.string(), series);
  MultiscaleSeries back = smds::read_bundle(dir.string());
  CHECK(std::isnan(back.behavior(3, 1)));
  CHECK(back.behavior(3, 0) == series.behavior(3, 0));
}

TEST_CASE("model files round trip exactly") {
  fs::path dir = fresh_dir("model");
  smds::SimConfig sc;
  sc.d = 4;
  sc.C = 2;
  sc.F = 2;
  sc.M = 2;
  sc.shared_mode_pairs = 2;
  sc.spike_only_pairs = 0;
  sc.field_only_pairs = 0;
  Rng rng(72);
  SwitchingModel model = smds::random_switching_model(sc, rng);
  std::string path = (dir / "model.json").string();
  smds::write_model_file(path, model);
  SwitchingModel back = smds::read_model_file(path);
  CHECK(back.num_regimes() == 2);
  CHECK((back.Phi - model.Phi).cwiseAbs().maxCoeff() == 0.0);
  for (int j = 0; j < 2; ++j) {
    CHECK((back.regimes[j].A - model.regimes[j].A).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK((back.regimes[j].beta - model.regimes[j].beta)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  CHECK(back.tau == model.tau);
  CHECK_THROWS_AS(smds::read_model_file((dir / "absent.json").string()),
                  smds::IoError);
}
