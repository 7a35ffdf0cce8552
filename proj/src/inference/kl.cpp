#include "nfest/inference/kl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <string>

#include "nfest/random.hpp"

namespace nfest::inference {
namespace {

// Rows sorted by the first coordinate; a query scans outward from its
// insertion point and stops once the first-coordinate gap alone exceeds the
// current k-th best distance.
class SortedIndex {
 public:
  explicit SortedIndex(const Tensor& pts) : pts_(pts), order_(pts.rows()) {
    std::iota(order_.begin(), order_.end(), 0);
    std::sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
      return pts_.at(a, 0) < pts_.at(b, 0);
    });
    keys_.reserve(order_.size());
    for (auto i : order_) keys_.push_back(pts_.at(i, 0));
  }

  double kth(const double* q, std::size_t k, std::size_t skip) const {
    const std::size_t d = pts_.cols();
    std::priority_queue<double> best;  // squared distances, max on top
    auto consider = [&](std::size_t pos) {
      const std::size_t i = order_[pos];
      if (i == skip) return;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = pts_.at(i, j) - q[j];
        s += diff * diff;
      }
      if (best.size() < k) {
        best.push(s);
      } else if (s < best.top()) {
        best.pop();
        best.push(s);
      }
    };
    auto bound = [&] {
      return best.size() < k ? std::numeric_limits<double>::infinity() : best.top();
    };
    const std::size_t mid =
        std::lower_bound(keys_.begin(), keys_.end(), q[0]) - keys_.begin();
    std::size_t lo = mid, hi = mid;
    while (lo > 0 || hi < keys_.size()) {
      const double gl = lo > 0 ? q[0] - keys_[lo - 1] : std::numeric_limits<double>::infinity();
      const double gh = hi < keys_.size() ? keys_[hi] - q[0]
                                           : std::numeric_limits<double>::infinity();
      const double g = std::min(gl, gh);
      if (g * g > bound()) break;
      if (gl <= gh) {
        consider(--lo);
      } else {
        consider(hi++);
      }
    }
    return std::sqrt(best.top());
  }

 private:
  const Tensor& pts_;
  std::vector<std::size_t> order_;
  std::vector<double> keys_;
};

// Separates exactly repeated rows.
Tensor jitter_duplicates(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto row_less = [&](std::size_t a, std::size_t b) {
    for (std::size_t j = 0; j < d; ++j) {
      if (x.at(a, j) != x.at(b, j)) return x.at(a, j) < x.at(b, j);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), row_less);
  Tensor out = x;
  auto rng = make_stream(0, 0, 50);
  for (std::size_t p = 1; p < n; ++p) {
    if (row_less(order[p - 1], order[p])) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = x.at(order[p], j);
      out.at(order[p], j) = v + 1e-12 * std::max(1.0, std::abs(v)) * standard_normal(rng);
    }
  }
  return out;
}

}  // namespace

void KlConfig::validate() const {
  if (k < 1) throw std::invalid_argument("kl k must be >= 1");
}

std::vector<double> kth_neighbor_distance(const Tensor& queries,
                                          const Tensor& points, std::size_t k,
                                          bool exclude_self) {
  if (queries.rank() != 2 || points.rank() != 2 || queries.cols() != points.cols()) {
    throw std::invalid_argument("neighbour search needs [n, d] and [m, d] samples");
  }
  const std::size_t avail = points.rows() - (exclude_self ? 1 : 0);
  if (points.rows() == 0 || avail < k) {
    throw InsufficientSamples("need at least " + std::to_string(k) +
                              " neighbours, have " + std::to_string(avail));
  }
  SortedIndex index(points);
  std::vector<double> out(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    out[i] = index.kth(queries.values().data() + i * queries.cols(), k,
                       exclude_self ? i : static_cast<std::size_t>(-1));
  }
  return out;
}

double kl_knn(const Tensor& p_hat, const Tensor& p, const KlConfig& config) {
  config.validate();
  if (p_hat.rank() != 2 || p.rank() != 2 || p_hat.cols() != p.cols()) {
    throw std::invalid_argument("kl_knn needs sample sets [n, d] and [m, d]");
  }
  const std::size_t n = p_hat.rows(), m = p.rows(), d = p.cols(), k = config.k;
  if (n <= k || m < k) {
    throw InsufficientSamples("kl_knn needs n > k and m >= k (n = " + std::to_string(n) +
                              ", m = " + std::to_string(m) + ", k = " + std::to_string(k) +
                              ")");
  }
  const Tensor x = jitter_duplicates(p_hat);
  const auto r = kth_neighbor_distance(x, x, k, true);
  const auto s = kth_neighbor_distance(x, p, k, false);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(r[i] > 0.0) || !(s[i] > 0.0)) {
      throw DegenerateDistance("zero neighbour distance at sample " + std::to_string(i));
    }
    acc += std::log(s[i] / r[i]);
  }
  return static_cast<double>(d) / static_cast<double>(n) * acc +
         std::log(static_cast<double>(m) / static_cast<double>(n - 1));
}

}  // namespace nfest::inference
