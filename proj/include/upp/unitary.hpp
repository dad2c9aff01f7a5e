#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "upp/error.hpp"
#include "upp/rng.hpp"

namespace upp {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using RealMatrix = Eigen::MatrixXd;
using RealVector = Eigen::VectorXd;

inline constexpr double kDefaultUnitaryTolerance = 1e-10;

inline bool all_finite(const ComplexMatrix& m) { return m.allFinite(); }

/// ‖M†M − I‖_max
inline double unitarity_defect(const ComplexMatrix& m) {
  detail::require(m.rows() == m.cols(), "unitarity_defect: matrix is not square");
  const ComplexMatrix gram = m.adjoint() * m;
  return (gram - ComplexMatrix::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
}

/// Square complex matrix verified unitary at construction.
class Unitary {
 public:
  explicit Unitary(ComplexMatrix m, double tolerance = kDefaultUnitaryTolerance)
      : matrix_(std::move(m)) {
    detail::require(matrix_.rows() >= 1 && matrix_.rows() == matrix_.cols(),
                    "Unitary: matrix must be square and non-empty");
    detail::require(all_finite(matrix_), "Unitary: non-finite entry");
    const double defect = unitarity_defect(matrix_);
    if (!(defect <= tolerance)) {
      throw ConfigError("Unitary: defect " + std::to_string(defect) +
                        " exceeds tolerance " + std::to_string(tolerance));
    }
  }

  static Unitary identity(Eigen::Index n) {
    return Unitary(ComplexMatrix::Identity(n, n));
  }

  const ComplexMatrix& matrix() const noexcept { return matrix_; }
  Eigen::Index size() const noexcept { return matrix_.rows(); }
  RealMatrix amplitudes() const { return matrix_.cwiseAbs(); }

  Complex operator()(Eigen::Index i, Eigen::Index j) const { return matrix_(i, j); }

 private:
  ComplexMatrix matrix_;
};

/// Haar-distributed unitary from the QR factorization of a complex Ginibre
/// matrix, with the phases of diag(R) moved into Q.
inline Unitary haar_random_unitary(Eigen::Index n, std::uint64_t seed) {
  detail::require(n >= 1, "haar_random_unitary: n must be >= 1");
  Rng rng(seed);
  ComplexMatrix z(n, n);
  // Column-major fill order is part of the reproducibility contract.
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double re = rng.normal();
      const double im = rng.normal();
      z(i, j) = Complex(re, im) / std::sqrt(2.0);
    }
  }
  Eigen::HouseholderQR<ComplexMatrix> qr(z);
  ComplexMatrix q = qr.householderQ();
  const ComplexMatrix& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j) {
    const Complex d = r(j, j);
    const double mag = std::abs(d);
    q.col(j) *= (mag > 0.0) ? d / mag : Complex(1.0);
  }
  return Unitary(std::move(q));
}

/// Identity on n modes with the 2×2 block `block` on modes {i, i+1}.
inline ComplexMatrix embed_two_mode(Eigen::Index n, Eigen::Index i, const ComplexMatrix& block) {
  detail::require(block.rows() == 2 && block.cols() == 2, "embed_two_mode: block must be 2x2");
  detail::require(n >= 2 && i >= 0 && i <= n - 2, "embed_two_mode: mode index out of range");
  ComplexMatrix out = ComplexMatrix::Identity(n, n);
  out.block(i, i, 2, 2) = block;
  return out;
}

// ---------------------------------------------------------------------------
// JSON: {"rows": r, "cols": c, "re": [...], "im": [...]} in row-major order.

inline nlohmann::json matrix_to_json(const ComplexMatrix& m) {
  nlohmann::json re = nlohmann::json::array();
  nlohmann::json im = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      re.push_back(m(i, j).real());
      im.push_back(m(i, j).imag());
    }
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"re", std::move(re)}, {"im", std::move(im)}};
}

inline ComplexMatrix matrix_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& re = j.at("re");
    const auto& im = j.at("im");
    detail::require(rows >= 1 && cols >= 1, "matrix json: empty shape");
    detail::require(re.size() == static_cast<std::size_t>(rows * cols) && im.size() == re.size(),
                    "matrix json: entry count does not match shape");
    ComplexMatrix m(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index c = 0; c < cols; ++c, ++k) {
        m(i, c) = Complex(re[k].get<double>(), im[k].get<double>());
      }
    }
    detail::require(all_finite(m), "matrix json: non-finite entry");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("matrix json: ") + e.what());
  }
}

}  // namespace upp
