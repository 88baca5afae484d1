#include "smds/model.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

namespace smds {

namespace {

using nlohmann::json;

json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vec_to_json(const Vec& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Mat json_to_mat(const json& j, const char* name) {
  if (!j.is_array()) throw ConfigError(std::string(name) + ": expected array");
  const int rows = static_cast<int>(j.size());
  if (rows == 0) return Mat(0, 0);
  if (!j[0].is_array()) {
    throw ConfigError(std::string(name) + ": expected array of rows");
  }
  const int cols = static_cast<int>(j[0].size());
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (static_cast<int>(j[i].size()) != cols) {
      throw ConfigError(std::string(name) + ": ragged rows");
    }
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

Vec json_to_vec(const json& j, const char* name) {
  if (!j.is_array()) throw ConfigError(std::string(name) + ": expected array");
  Vec v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(static_cast<int>(i)) = j[i].get<double>();
  return v;
}

void check_symmetric_psd(const Mat& m, const std::string& label, double tol,
                         std::vector<std::string>& out) {
  if (m.rows() != m.cols()) {
    out.push_back(label + ": not square");
    return;
  }
  double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > tol) {
    std::ostringstream msg;
    msg << label << ": asymmetry " << asym;
    out.push_back(msg.str());
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -1e-10) {
    std::ostringstream msg;
    msg << label << ": min eigenvalue " << min_eig;
    out.push_back(msg.str());
  }
}

}  // namespace

std::vector<std::string> validate_model(const SwitchingModel& model) {
  std::vector<std::string> out;
  const int M = model.num_regimes();
  if (M == 0) {
    out.push_back("regimes: empty");
    return out;
  }
  const int d = model.latent_dim();
  const int C = model.num_cells();
  const int F = model.num_fields();

  for (int j = 0; j < M; ++j) {
    const RegimeParams& rp = model.regimes[j];
    const std::string tag = "regime " + std::to_string(j + 1);
    if (rp.A.rows() != d || rp.A.cols() != d) out.push_back(tag + ": A shape");
    if (rp.Q.rows() != d || rp.Q.cols() != d) out.push_back(tag + ": Q shape");
    if (rp.alpha.size() != C) out.push_back(tag + ": alpha length");
    if (rp.beta.rows() != C || rp.beta.cols() != d) {
      out.push_back(tag + ": beta shape");
    }
    if (rp.C.rows() != F || rp.C.cols() != d) out.push_back(tag + ": C shape");
    if (rp.R.rows() != F || rp.R.cols() != F) out.push_back(tag + ": R shape");
    if (rp.Q.rows() == d && rp.Q.cols() == d) {
      check_symmetric_psd(rp.Q, tag + ": Q", 1e-10, out);
    }
    if (rp.R.rows() == F && rp.R.cols() == F && F > 0) {
      check_symmetric_psd(rp.R, tag + ": R", 1e-10, out);
    }
  }

  if (model.Phi.rows() != M || model.Phi.cols() != M) {
    out.push_back("Phi: shape");
  } else {
    for (int i = 0; i < M; ++i) {
      double col_sum = model.Phi.col(i).sum();
      if (std::abs(col_sum - 1.0) > 1e-12) {
        std::ostringstream msg;
        msg << "Phi: column " << i + 1 << " sums to " << col_sum;
        out.push_back(msg.str());
      }
      if (model.Phi.col(i).minCoeff() < 0) {
        out.push_back("Phi: negative entry in column " + std::to_string(i + 1));
      }
    }
  }

  if (model.pi0.size() != M) {
    out.push_back("pi0: length");
  } else {
    double s = model.pi0.sum();
    if (std::abs(s - 1.0) > 1e-12) {
      std::ostringstream msg;
      msg << "pi0: sums to " << s;
      out.push_back(msg.str());
    }
    if (model.pi0.minCoeff() < 0) out.push_back("pi0: negative entry");
  }

  if (model.mu0.size() != d) out.push_back("mu0: length");
  if (model.Lambda0.rows() != d || model.Lambda0.cols() != d) {
    out.push_back("Lambda0: shape");
  } else {
    check_symmetric_psd(model.Lambda0, "Lambda0", 1e-10, out);
  }

  if (!(model.tau >= 0.0)) out.push_back("tau: must be >= 0");
  if (!(model.dt_ms > 0.0)) out.push_back("dt_ms: must be > 0");
  if (model.field_period_steps < 1) {
    out.push_back("field_period_steps: must be >= 1");
  }
  return out;
}

std::string serialize_model(const SwitchingModel& model) {
  json doc;
  doc["version"] = 1;
  doc["M"] = model.num_regimes();
  doc["d"] = model.latent_dim();
  doc["C"] = model.num_cells();
  doc["F"] = model.num_fields();
  doc["dt_ms"] = model.dt_ms;
  doc["field_period_steps"] = model.field_period_steps;
  doc["tau"] = model.tau;
  doc["pi0"] = vec_to_json(model.pi0);
  doc["Phi"] = mat_to_json(model.Phi);
  doc["mu0"] = vec_to_json(model.mu0);
  doc["Lambda0"] = mat_to_json(model.Lambda0);
  json regimes = json::array();
  for (const RegimeParams& rp : model.regimes) {
    json r;
    r["A"] = mat_to_json(rp.A);
    r["Q"] = mat_to_json(rp.Q);
    r["alpha"] = vec_to_json(rp.alpha);
    r["beta"] = mat_to_json(rp.beta);
    r["C"] = mat_to_json(rp.C);
    r["R"] = mat_to_json(rp.R);
    regimes.push_back(std::move(r));
  }
  doc["regimes"] = std::move(regimes);
  return doc.dump(2);
}

SwitchingModel deserialize_model(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model parse error: ") + e.what());
  }
  for (const char* key : {"M", "d", "C", "F", "dt_ms", "field_period_steps",
                          "tau", "pi0", "Phi", "mu0", "Lambda0", "regimes"}) {
    if (!doc.contains(key)) {
      throw ConfigError(std::string("model document missing field: ") + key);
    }
  }
  SwitchingModel model;
  model.dt_ms = doc["dt_ms"].get<double>();
  model.field_period_steps = doc["field_period_steps"].get<int>();
  model.tau = doc["tau"].get<double>();
  model.pi0 = json_to_vec(doc["pi0"], "pi0");
  model.Phi = json_to_mat(doc["Phi"], "Phi");
  model.mu0 = json_to_vec(doc["mu0"], "mu0");
  model.Lambda0 = json_to_mat(doc["Lambda0"], "Lambda0");
  const int M = doc["M"].get<int>();
  const int d = doc["d"].get<int>();
  const int C = doc["C"].get<int>();
  const int F = doc["F"].get<int>();
  if (static_cast<int>(doc["regimes"].size()) != M) {
    throw ConfigError("model document: regimes length disagrees with M");
  }
  for (const json& r : doc["regimes"]) {
    RegimeParams rp;
    rp.A = json_to_mat(r.at("A"), "A");
    rp.Q = json_to_mat(r.at("Q"), "Q");
    rp.alpha = json_to_vec(r.at("alpha"), "alpha");
    rp.beta = json_to_mat(r.at("beta"), "beta");
    rp.C = json_to_mat(r.at("C"), "C");
    rp.R = json_to_mat(r.at("R"), "R");
    if (rp.C.rows() == 0) rp.C = Mat::Zero(F, d);
    if (rp.R.rows() == 0) rp.R = Mat::Zero(F, F);
    if (rp.beta.rows() == 0) rp.beta = Mat::Zero(C, d);
    model.regimes.push_back(std::move(rp));
  }
  if (model.latent_dim() != d || model.num_cells() != C ||
      model.num_fields() != F) {
    throw ConfigError("model document: header dims disagree with parameters");
  }
  std::vector<std::string> violations = validate_model(model);
  if (!violations.empty()) {
    std::string msg = "model document violates invariants:";
    for (const std::string& v : violations) msg += "\n  " + v;
    throw ConfigError(msg);
  }
  return model;
}

}  // namespace smds
