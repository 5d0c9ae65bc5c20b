#pragma once

// Straight-line reference implementations used to cross-check the library.
// They deliberately avoid the library's helpers (no shared normalize, no
// shared softmax) so that a bug in one is not mirrored in the other.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "latte/core_math.hpp"
#include "latte/encoders.hpp"
#include "latte/prototype_bank.hpp"
#include "latte/random.hpp"

namespace oracle {

using latte::Matrix;
using latte::Vector;

inline double naive_cosine(const Vector& a, const Vector& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline Vector naive_normalize(const Vector& v) {
  double s = 0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  Vector out;
  for (double x : v) out.push_back(x / s);
  return out;
}

inline Vector row_of(const Matrix& m, std::size_t r) {
  Vector v;
  for (std::size_t c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  return v;
}

/// Sort every similarity, subtract the two largest.
inline double full_sort_weight(const Vector& text, const Matrix& protos) {
  std::vector<double> sims;
  for (std::size_t c = 0; c < protos.rows(); ++c) sims.push_back(naive_cosine(text, row_of(protos, c)));
  std::sort(sims.begin(), sims.end(), std::greater<>());
  return sims[0] - sims[1];
}

/// (1 - alpha) * sum w_i n_i / sum w_i + alpha * p, one coordinate at a time.
inline Vector closed_form_mix(const std::vector<Vector>& normalized_texts, const std::vector<double>& w,
                              const Vector& proto, double alpha) {
  double wsum = 0;
  for (double x : w) wsum += x;
  Vector out(proto.size());
  for (std::size_t k = 0; k < proto.size(); ++k) {
    double acc = 0;
    for (std::size_t i = 0; i < normalized_texts.size(); ++i) acc += w[i] * normalized_texts[i][k];
    out[k] = (1 - alpha) * acc / wsum + alpha * proto[k];
  }
  return out;
}

/// Symmetric InfoNCE, two explicit double loops with log-sum-exp.
inline double double_loop_infonce(const Matrix& img, const Matrix& txt, double tau) {
  const std::size_t n = img.rows();
  std::vector<Vector> u, v;
  for (std::size_t i = 0; i < n; ++i) {
    u.push_back(naive_normalize(row_of(img, i)));
    v.push_back(naive_normalize(row_of(txt, i)));
  }
  auto logit = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < u[i].size(); ++k) s += u[i][k] * v[j][k];
    return s / tau;
  };
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logit(i, j));
    loss -= (logit(i, i) - std::log(z)) / double(n);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double z = 0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logit(i, j));
    loss -= (logit(j, j) - std::log(z)) / double(n);
  }
  return loss;
}

/// Bitwise FNV-1a over bytes, written from the published constants.
inline std::uint64_t reference_fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline Vector matvec_loop(const Matrix& w, const Vector& x) {
  Vector out(w.cols(), 0.0);
  for (std::size_t c = 0; c < w.cols(); ++c)
    for (std::size_t r = 0; r < w.rows(); ++r) out[c] += x[r] * w(r, c);
  return out;
}

inline std::size_t brute_argmax(const Vector& q, const Matrix& rows) {
  std::size_t best = 0;
  double best_sim = -2;
  for (std::size_t c = 0; c < rows.rows(); ++c) {
    const double s = naive_cosine(q, row_of(rows, c));
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

// ---- random instances ---------------------------------------------------------------

/// std::mt19937_64 based, separate from the library RNG on purpose.
struct Gen {
  std::mt19937_64 eng;
  explicit Gen(std::uint64_t seed) : eng(seed) {}
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
  std::size_t between(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(eng);
  }
  Vector vec(std::size_t d) {
    Vector v(d);
    for (double& x : v) x = normal();
    return v;
  }
  Matrix mat(std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.data()) x = normal();
    return m;
  }
};

inline latte::PrototypeBank random_bank(Gen& g, std::size_t c, std::size_t d, double mu = 0.99,
                                        double alpha = 0.99) {
  latte::PrototypeBank b;
  for (std::size_t i = 0; i < c; ++i) b.class_names.push_back("class" + std::to_string(i));
  b.vectors = Matrix(c, d);
  for (std::size_t i = 0; i < c; ++i) b.vectors.set_row(i, naive_normalize(g.vec(d)));
  b.mu = mu;
  b.alpha = alpha;
  return b;
}

// ---- finite differences -------------------------------------------------------------

/// Every trainable scalar of the encoder, in a fixed order.
inline std::vector<double*> parameters(latte::EncoderParams& p) {
  std::vector<double*> out;
  for (double& w : p.image_weights.data()) out.push_back(&w);
  for (double& w : p.text_weights.data()) out.push_back(&w);
  out.push_back(&p.logit_scale);
  return out;
}

inline std::vector<double> central_differences(latte::EncoderParams p,
                                               const std::function<double(const latte::EncoderParams&)>& f,
                                               double h = 1e-5) {
  std::vector<double> g;
  for (double* w : parameters(p)) {
    const double keep = *w;
    *w = keep + h;
    const double up = f(p);
    *w = keep - h;
    const double down = f(p);
    *w = keep;
    g.push_back((up - down) / (2 * h));
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

// ---- misc -------------------------------------------------------------------------------

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("latte_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace oracle
