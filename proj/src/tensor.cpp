#include "mtopt/tensor.hpp"

namespace mtopt {

double Tensor4::component(int i, int j, int k, int l) const {
    auto voigt = [](int a, int b) { return (a == b) ? a : 2; };
    auto factor = [](int idx) { return idx == 2 ? std::sqrt(2.0) : 1.0; };
    const int I = voigt(i, j), J = voigt(k, l);
    return m_(I, J) / (factor(I) * factor(J));
}

Tensor4 make_isotropic(double young, double poisson) {
    if (!(young > 0.0)) throw ConfigError("make_isotropic: Young modulus must be positive");
    if (!(poisson > -1.0 && poisson < 0.5))
        throw ConfigError("make_isotropic: Poisson ratio must lie in (-1, 0.5)");
    const double lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    const double mu = young / (2.0 * (1.0 + poisson));
    Mat3 m;
    m << lambda + 2.0 * mu, lambda, 0.0, //
        lambda, lambda + 2.0 * mu, 0.0,  //
        0.0, 0.0, 2.0 * mu;
    return Tensor4(m);
}

std::pair<double, double> spectral_bounds(const Tensor4& c) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(c.mandel());
    return {es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff()};
}

} // namespace mtopt
