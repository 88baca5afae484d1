#include "smds/bundle.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace smds {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_real(double v) {
  if (std::isnan(v)) return std::string();
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.good()) throw IoError("write failed for " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string all((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= all.size()) {
    std::size_t end = all.find('\n', start);
    if (end == std::string::npos) {
      if (start < all.size()) lines.push_back(all.substr(start));
      break;
    }
    lines.push_back(all.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t end = line.find(',', start);
    if (end == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, end - start));
    start = end + 1;
  }
  return cells;
}

[[noreturn]] void bad_cell(const fs::path& path, int line,
                           std::string_view cell) {
  throw IoError(path.string() + ":" + std::to_string(line + 1) +
                ": bad number '" + std::string(cell) + "'");
}

double parse_real(std::string_view cell, const fs::path& path, int line) {
  if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
    bad_cell(path, line, cell);
  }
  return v;
}

int parse_int(std::string_view cell, const fs::path& path, int line) {
  int v = 0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
    bad_cell(path, line, cell);
  }
  return v;
}

void check_rows(const fs::path& path, int want, int got) {
  if (want != got) {
    throw IoError(path.string() + ": expected " + std::to_string(want) +
                  " rows, found " + std::to_string(got));
  }
}

void check_cols(const fs::path& path, int line, int want, int got) {
  if (want != got) {
    throw IoError(path.string() + ":" + std::to_string(line + 1) +
                  ": expected " + std::to_string(want) + " cells, found " +
                  std::to_string(got));
  }
}

Mat read_real_matrix(const fs::path& path, int rows, int cols) {
  std::vector<std::string> lines = read_lines(path);
  check_rows(path, rows, static_cast<int>(lines.size()));
  Mat out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    std::vector<std::string_view> cells = split_row(lines[r]);
    check_cols(path, r, cols, static_cast<int>(cells.size()));
    for (int c = 0; c < cols; ++c) out(r, c) = parse_real(cells[c], path, r);
  }
  return out;
}

}  // namespace

void write_bundle(const std::string& dir, const MultiscaleSeries& series,
                  int M_true) {
  const int T = series.num_steps();
  const int C = series.num_cells();
  const int F = series.num_fields();
  const int B = static_cast<int>(series.behavior.cols());
  if (static_cast<int>(series.field_mask.size()) != T) {
    throw ConfigError("write_bundle: field mask length does not match steps");
  }
  if (B > 0 && static_cast<int>(series.behavior.rows()) != T) {
    throw ConfigError("write_bundle: behavior rows do not match steps");
  }
  if (!series.regimes.empty() &&
      static_cast<int>(series.regimes.size()) != T) {
    throw ConfigError("write_bundle: regimes length does not match steps");
  }
  if (series.latents.size() > 0 &&
      static_cast<int>(series.latents.rows()) != T + 1) {
    throw ConfigError("write_bundle: latents must have T+1 rows");
  }

  fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create directory " + root.string());

  json meta;
  meta["schema_version"] = 1;
  meta["T"] = T;
  meta["C"] = C;
  meta["F"] = F;
  meta["B"] = B;
  if (M_true > 0) meta["M_true"] = M_true;
  meta["dt_ms"] = series.dt_ms;
  meta["field_period_steps"] = series.field_period_steps;
  write_text(root / "meta.json", meta.dump(2) + "\n");

  if (C > 0) {
    std::string text;
    for (int t = 0; t < T; ++t) {
      for (int c = 0; c < C; ++c) {
        if (c > 0) text += ',';
        text += std::to_string(series.spikes(t, c));
      }
      text += '\n';
    }
    write_text(root / "spikes.csv", text);
  }

  if (F > 0) {
    std::string text;
    for (int t = 0; t < T; ++t) {
      if (series.field_mask[t]) {
        for (int f = 0; f < F; ++f) {
          if (f > 0) text += ',';
          text += format_real(series.fields(t, f));
        }
      } else {
        text.append(F - 1, ',');
      }
      text += '\n';
    }
    write_text(root / "fields.csv", text);
  }

  if (B > 0) {
    std::string text;
    for (int t = 0; t < T; ++t) {
      for (int b = 0; b < B; ++b) {
        if (b > 0) text += ',';
        text += format_real(series.behavior(t, b));
      }
      text += '\n';
    }
    write_text(root / "behavior.csv", text);
  }

  if (!series.regimes.empty()) {
    std::string text;
    for (int t = 0; t < T; ++t) {
      text += std::to_string(series.regimes[t]);
      text += '\n';
    }
    write_text(root / "regimes.csv", text);
  }

  if (series.latents.size() > 0) {
    const int d = static_cast<int>(series.latents.cols());
    std::string text;
    for (int t = 0; t <= T; ++t) {
      for (int k = 0; k < d; ++k) {
        if (k > 0) text += ',';
        text += format_real(series.latents(t, k));
      }
      text += '\n';
    }
    write_text(root / "latents.csv", text);
  }
}

BundleMeta read_bundle_meta(const std::string& dir) {
  fs::path path = fs::path(dir) / "meta.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  BundleMeta out;
  try {
    out.schema_version = meta.at("schema_version").get<int>();
    out.T = meta.at("T").get<int>();
    out.C = meta.at("C").get<int>();
    out.F = meta.at("F").get<int>();
    out.B = meta.at("B").get<int>();
    out.dt_ms = meta.at("dt_ms").get<double>();
    out.field_period_steps = meta.at("field_period_steps").get<int>();
    if (meta.contains("M_true")) out.M_true = meta["M_true"].get<int>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (out.schema_version != 1) {
    throw IoError(path.string() + ": unsupported schema_version " +
                  std::to_string(out.schema_version));
  }
  if (out.T < 0 || out.C < 0 || out.F < 0 || out.B < 0) {
    throw IoError(path.string() + ": negative dimension");
  }
  return out;
}

MultiscaleSeries read_bundle(const std::string& dir) {
  BundleMeta meta = read_bundle_meta(dir);
  fs::path root(dir);
  MultiscaleSeries series;
  series.dt_ms = meta.dt_ms;
  series.field_period_steps = meta.field_period_steps;

  series.spikes = Eigen::MatrixXi::Zero(meta.T, meta.C);
  if (meta.C > 0) {
    fs::path path = root / "spikes.csv";
    std::vector<std::string> lines = read_lines(path);
    check_rows(path, meta.T, static_cast<int>(lines.size()));
    for (int t = 0; t < meta.T; ++t) {
      std::vector<std::string_view> cells = split_row(lines[t]);
      check_cols(path, t, meta.C, static_cast<int>(cells.size()));
      for (int c = 0; c < meta.C; ++c) {
        series.spikes(t, c) = parse_int(cells[c], path, t);
      }
    }
  }

  series.fields = Mat::Zero(meta.T, meta.F);
  series.field_mask.assign(meta.T, 0);
  if (meta.F > 0) {
    fs::path path = root / "fields.csv";
    std::vector<std::string> lines = read_lines(path);
    check_rows(path, meta.T, static_cast<int>(lines.size()));
    for (int t = 0; t < meta.T; ++t) {
      std::vector<std::string_view> cells = split_row(lines[t]);
      check_cols(path, t, meta.F, static_cast<int>(cells.size()));
      int empty = 0;
      for (const auto& cell : cells) empty += cell.empty() ? 1 : 0;
      if (empty == meta.F) continue;
      if (empty != 0) {
        throw IoError(path.string() + ":" + std::to_string(t + 1) +
                      ": partially observed field row");
      }
      series.field_mask[t] = 1;
      for (int f = 0; f < meta.F; ++f) {
        series.fields(t, f) = parse_real(cells[f], path, t);
      }
    }
  }

  if (meta.B > 0) {
    series.behavior = read_real_matrix(root / "behavior.csv", meta.T, meta.B);
  }

  if (fs::exists(root / "regimes.csv")) {
    fs::path path = root / "regimes.csv";
    std::vector<std::string> lines = read_lines(path);
    check_rows(path, meta.T, static_cast<int>(lines.size()));
    series.regimes.resize(meta.T);
    for (int t = 0; t < meta.T; ++t) {
      std::vector<std::string_view> cells = split_row(lines[t]);
      check_cols(path, t, 1, static_cast<int>(cells.size()));
      series.regimes[t] = parse_int(cells[0], path, t);
    }
  }

  if (fs::exists(root / "latents.csv")) {
    fs::path path = root / "latents.csv";
    std::vector<std::string> lines = read_lines(path);
    check_rows(path, meta.T + 1, static_cast<int>(lines.size()));
    const int d = static_cast<int>(split_row(lines[0]).size());
    series.latents = read_real_matrix(path, meta.T + 1, d);
  }

  return series;
}

void write_model_file(const std::string& path, const SwitchingModel& model) {
  write_text(fs::path(path), serialize_model(model));
}

SwitchingModel read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return deserialize_model(text);
}

}  // namespace smds
