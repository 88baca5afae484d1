#pragma once

#include <string>

#include "smds/model.hpp"

namespace smds {

/// Contents of meta.json inside a dataset bundle directory.
struct BundleMeta {
  int schema_version = 1;
  int T = 0;
  int C = 0;
  int F = 0;
  int B = 0;
  int M_true = 0;  // 0 when the generating regime count is unknown
  double dt_ms = 10.0;
  int field_period_steps = 5;
};

/// Writes a bundle directory: meta.json plus one CSV per data block.  Blocks
/// that are absent from the series (no behavior, no ground truth) produce no
/// file.  Field rows at unobserved steps are written as empty cells so the
/// mask survives the round trip.
void write_bundle(const std::string& dir, const MultiscaleSeries& series,
                  int M_true = 0);

/// Reads a bundle directory back.  The field mask is recovered from the empty
/// rows of fields.csv; row counts are checked against meta.json.
MultiscaleSeries read_bundle(const std::string& dir);

BundleMeta read_bundle_meta(const std::string& dir);

/// Model file round trip through the JSON model serializer.
void write_model_file(const std::string& path, const SwitchingModel& model);
SwitchingModel read_model_file(const std::string& path);

}  // namespace smds
