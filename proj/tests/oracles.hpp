// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop reference implementations used as test oracles. These work on
// plain nested vectors and share no code with the library.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace fgsn::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, m[r][c]

inline Mat to_mat(const Eigen::MatrixXd& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

inline Vec to_vec(const Eigen::VectorXd& v) { return Vec(v.data(), v.data() + v.size()); }

inline double max_rel_err(const Mat& want, const Eigen::MatrixXd& got) {
  double err = 0, scale = 0;
  for (std::size_t r = 0; r < want.size(); ++r)
    for (std::size_t c = 0; c < want[r].size(); ++c) {
      err = std::max(err, std::abs(want[r][c] - got(r, c)));
      scale = std::max(scale, std::abs(want[r][c]));
    }
  return scale > 0 ? err / scale : err;
}

inline double max_rel_err(const Vec& want, const Eigen::VectorXd& got) {
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    err = std::max(err, std::abs(want[i] - got[static_cast<Eigen::Index>(i)]));
    scale = std::max(scale, std::abs(want[i]));
  }
  return scale > 0 ? err / scale : err;
}

// Mean of per-prompt vectors.
inline Vec mean(const std::vector<Vec>& xs) {
  Vec out(xs.front().size(), 0.0);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += x[i];
  for (auto& v : out) v /= static_cast<double>(xs.size());
  return out;
}

inline double cosine(const Vec& a, const Vec& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  if (c > 1) c = 1;
  if (c < -1) c = -1;
  return c;
}

// w is d_in x n (column j feeds neuron j).
inline Vec importance(const Mat& w, const Vec& act) {
  Vec out(act.size(), 0.0);
  for (std::size_t j = 0; j < act.size(); ++j) {
    double s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i][j];
    out[j] = s * act[j];
  }
  return out;
}

// Top set by repeated arg-max scanning; ties go to the lower index.
inline std::vector<bool> top_set(const Vec& scores, double percent) {
  const std::size_t n = scores.size();
  std::size_t k = 0;
  while (k < n && static_cast<double>(k) < percent / 100.0 * static_cast<double>(n) - 1e-9) ++k;
  std::vector<bool> taken(n, false);
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j)
      if (!taken[j] && (best == n || scores[j] > scores[best])) best = j;
    taken[best] = true;
  }
  return taken;
}

inline std::vector<std::uint8_t> mask_layer(const Vec& harm, const Vec& benign, double q, double p) {
  const auto h = top_set(harm, q);
  const auto b = top_set(benign, p);
  std::vector<std::uint8_t> out(harm.size());
  for (std::size_t j = 0; j < harm.size(); ++j) out[j] = h[j] && !b[j];
  return out;
}

inline Mat gram(const Mat& delta) {
  const std::size_t rows = delta.size(), cols = delta.front().size();
  Mat out(rows, Vec(rows, 0.0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < cols; ++k) s += delta[i][k] * delta[j][k];
      out[i][j] = s / static_cast<double>(cols);
    }
  return out;
}

inline Mat masked_apply(const Mat& b, const std::vector<std::uint8_t>& mask, const Mat& w_safe) {
  Mat out = b;
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (!mask[j]) continue;
    for (std::size_t c = 0; c < b[j].size(); ++c) {
      double s = 0;
      for (std::size_t k = 0; k < b.size(); ++k) s += w_safe[j][k] * b[k][c];
      out[j][c] = s;
    }
  }
  return out;
}

// W + scale * B * A.
inline Mat lora_merge(const Mat& w, const Mat& a, const Mat& b, double scale) {
  Mat out = w;
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < w[i].size(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.size(); ++k) s += b[i][k] * a[k][j];
      out[i][j] += scale * s;
    }
  return out;
}

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1,
                                     double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index n, double lo = -1, double hi = 1) {
  return random_matrix(rng, n, 1, lo, hi);
}

inline int random_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace fgsn::oracle
