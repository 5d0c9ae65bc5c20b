#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "latte/core_math.hpp"

namespace latte {

struct ContrastiveResult {
  double loss = 0.0;
  Matrix grad_image;  // dL / d(raw image embedding), N x d
  Matrix grad_text;   // dL / d(raw text embedding), N x d
  double grad_inv_temperature = 0.0;  // dL / d(1 / tau)
};

namespace detail {

inline Matrix normalize_rows(const Matrix& m, std::vector<double>& norms, const char* what) {
  Matrix out(m.rows(), m.cols());
  norms.resize(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    require_nondegenerate(m.row(i), std::string(what) + " row " + std::to_string(i));
    norms[i] = norm(m.row(i));
    // Finite entries can still overflow the squared sum.
    if (!std::isfinite(norms[i])) throw NumericError(std::string(what) + " row " + std::to_string(i) + " norm overflows");
    for (std::size_t k = 0; k < m.cols(); ++k) out(i, k) = m(i, k) / norms[i];
  }
  return out;
}

}  // namespace detail

/// Symmetric InfoNCE between matched rows. Rows are normalized internally;
/// logits are cosine / tau. The first term normalizes each image's logits over
/// texts, the second each text's logits over images.
inline ContrastiveResult contrastive_loss_with_grad(const Matrix& image_embs, const Matrix& text_embs,
                                                    double tau) {
  const std::size_t n = image_embs.rows();
  if (n == 0) throw ConfigError("contrastive loss needs a non-empty batch");
  if (text_embs.rows() != n || text_embs.cols() != image_embs.cols())
    throw ConfigError("image/text batch shapes differ");
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t d = image_embs.cols();
  const double scale = 1.0 / tau;

  std::vector<double> img_norm, txt_norm;
  const Matrix u = detail::normalize_rows(image_embs, img_norm, "image embedding");
  const Matrix v = detail::normalize_rows(text_embs, txt_norm, "text embedding");

  Matrix logits(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double s = dot(u.row(i), v.row(j));
      if (!std::isfinite(s))
        throw NumericError("non-finite similarity at (" + std::to_string(i) + ", " +
                           std::to_string(j) + ") in batch of " + std::to_string(n));
      logits(i, j) = s * scale;
    }

  // Row softmax (image -> texts) and column softmax (text -> images).
  Matrix p_row(n, n), p_col(n, n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) p_row(i, j) = std::exp(logits(i, j) - lse);
    loss -= (logits(i, i) - lse) / double(n);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logits(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) p_col(i, j) = std::exp(logits(i, j) - lse);
    loss -= (logits(j, j) - lse) / double(n);
  }

  ContrastiveResult r;
  r.loss = std::max(loss, 0.0);
  Matrix g_u(n, d), g_v(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double g_logit = (p_row(i, j) + p_col(i, j) - (i == j ? 2.0 : 0.0)) / double(n);
      r.grad_inv_temperature += g_logit * logits(i, j) / scale;
      const double g_sim = g_logit * scale;
      axpy(g_sim, v.row(j), g_u.row(i));
      axpy(g_sim, u.row(i), g_v.row(j));
    }
  r.grad_image = Matrix(n, d);
  r.grad_text = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    r.grad_image.set_row(i, normalize_backward(u.row(i), img_norm[i], g_u.row(i)));
    r.grad_text.set_row(i, normalize_backward(v.row(i), txt_norm[i], g_v.row(i)));
  }
  return r;
}

inline double contrastive_loss(const Matrix& image_embs, const Matrix& text_embs, double tau) {
  return contrastive_loss_with_grad(image_embs, text_embs, tau).loss;
}

}  // namespace latte
