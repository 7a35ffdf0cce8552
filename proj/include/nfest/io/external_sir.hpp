// Externally prepared SIR series: CSV with header `date,S,I,R`, ISO dates
// (YYYY-MM-DD) strictly increasing, S, I, R population fractions whose sum
// lies in [0.98, 1.02]. Raw case reports must be converted beforehand.
#pragma once

#include <string>
#include <vector>

#include "nfest/io/dataset.hpp"

namespace nfest::io {

struct ExternalSirSeries {
  std::vector<std::string> dates;
  std::vector<double> S, I, R;
};

/// Errors name the offending file row (header is row 1).
ExternalSirSeries read_external_sir(const std::string& path);

/// One trajectory with t = days since the first date, observation = state =
/// (S, I, R). Dates are kept in the sidecar.
Dataset external_to_dataset(const ExternalSirSeries& series);
ExternalSirSeries dataset_to_external(const Dataset& ds);
void write_external_sir(const ExternalSirSeries& series, const std::string& path);

}  // namespace nfest::io
