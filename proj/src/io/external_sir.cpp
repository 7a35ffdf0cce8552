#include "nfest/io/external_sir.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace nfest::io {
namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Days since 1970-01-01, or throws.
long parse_date(const std::string& s, std::size_t row) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) {
    throw SchemaError("row " + std::to_string(row) + ": bad date '" + s +
                      "' (expected YYYY-MM-DD)");
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                        std::chrono::day{d}};
  if (!ymd.ok()) throw SchemaError("row " + std::to_string(row) + ": invalid date '" + s + "'");
  return std::chrono::sys_days{ymd}.time_since_epoch().count();
}

double parse_fraction(const std::string& s, const char* what, std::size_t row) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw SchemaError("row " + std::to_string(row) + ": " + what + " = '" + s +
                      "' is not a number");
  }
  if (v < 0.0 || v > 1.0) {
    throw SchemaError("row " + std::to_string(row) + ": " + what + " = " + s +
                      " is outside [0, 1]");
  }
  return v;
}

}  // namespace

ExternalSirSeries read_external_sir(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path + ": empty file");
  {
    std::vector<std::string> head;
    std::istringstream h(line);
    for (std::string c; std::getline(h, c, ',');) head.push_back(trim(c));
    if (head != std::vector<std::string>{"date", "S", "I", "R"}) {
      throw SchemaError(path + ": row 1: header must be 'date,S,I,R'");
    }
  }
  ExternalSirSeries s;
  long prev = 0;
  std::size_t row = 1;
  try {
    while (std::getline(in, line)) {
      ++row;
      if (trim(line).empty()) continue;
      std::vector<std::string> cells;
      std::istringstream r(line);
      for (std::string c; std::getline(r, c, ',');) cells.push_back(trim(c));
      if (cells.size() != 4) {
        throw SchemaError("row " + std::to_string(row) + ": expected 4 columns, got " +
                          std::to_string(cells.size()));
      }
      const long day = parse_date(cells[0], row);
      if (!s.dates.empty() && day <= prev) {
        throw SchemaError("row " + std::to_string(row) + ": date " + cells[0] +
                          " does not follow " + s.dates.back() +
                          " (dates must be strictly increasing)");
      }
      prev = day;
      const double S = parse_fraction(cells[1], "S", row);
      const double I = parse_fraction(cells[2], "I", row);
      const double R = parse_fraction(cells[3], "R", row);
      const double total = S + I + R;
      if (total < 0.98 || total > 1.02) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6g", total);
        throw SchemaError("row " + std::to_string(row) + ": S+I+R = " + buf +
                          " is outside [0.98, 1.02]");
      }
      s.dates.push_back(cells[0]);
      s.S.push_back(S);
      s.I.push_back(I);
      s.R.push_back(R);
    }
  } catch (const SchemaError& e) {
    throw SchemaError(path + ": " + e.what());
  }
  if (s.dates.empty()) throw SchemaError(path + ": no data rows");
  return s;
}

Dataset external_to_dataset(const ExternalSirSeries& series) {
  Dataset ds;
  ds.system = "external";
  dynamics::Trajectory t;
  t.obs_names = {"S", "I", "R"};
  t.state_names = {"S", "I", "R"};
  const long day0 = parse_date(series.dates.front(), 2);
  for (std::size_t k = 0; k < series.dates.size(); ++k) {
    t.times.push_back(static_cast<double>(parse_date(series.dates[k], k + 2) - day0));
    for (double v : {series.S[k], series.I[k], series.R[k]}) {
      t.observations.push_back(v);
      t.states.push_back(v);
    }
  }
  ds.trajectories.push_back(std::move(t));
  ds.meta["dates"] = series.dates;
  return ds;
}

ExternalSirSeries dataset_to_external(const Dataset& ds) {
  if (ds.trajectories.size() != 1 || !ds.meta.contains("dates")) {
    throw SchemaError("dataset was not ingested from an external SIR series");
  }
  const auto& t = ds.trajectories.front();
  ExternalSirSeries s;
  s.dates = ds.meta.at("dates").get<std::vector<std::string>>();
  if (s.dates.size() != t.length()) throw SchemaError("date list does not match the rows");
  for (std::size_t k = 0; k < t.length(); ++k) {
    s.S.push_back(t.state(k)[0]);
    s.I.push_back(t.state(k)[1]);
    s.R.push_back(t.state(k)[2]);
  }
  return s;
}

void write_external_sir(const ExternalSirSeries& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "date,S,I,R\n";
  char buf[96];
  for (std::size_t k = 0; k < s.dates.size(); ++k) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", s.S[k], s.I[k], s.R[k]);
    out << s.dates[k] << buf;
  }
}

}  // namespace nfest::io
