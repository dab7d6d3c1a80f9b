#include <algorithm>
#include <vector>

#include "echoreg/losses.hpp"

namespace echoreg {

namespace {

// Summed-area table with a zero guard row/column: S(y, x) = sum of src[0..y) x [0..x).
class Integral {
public:
    Integral(int rows, int cols) : cols_(cols + 1), s_((rows + 1) * (cols + 1), 0.0) {}

    template <class F>
    void build(int rows, int cols, F&& value) {
        for (int y = 0; y < rows; ++y) {
            double row = 0.0;
            for (int x = 0; x < cols; ++x) {
                row += value(y, x);
                at(y + 1, x + 1) = at(y, x + 1) + row;
            }
        }
    }

    double box(int y0, int x0, int y1, int x1) const {
        return at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
    }

private:
    double& at(int y, int x) { return s_[y * cols_ + x]; }
    double at(int y, int x) const { return s_[y * cols_ + x]; }

    int cols_;
    std::vector<double> s_;
};

double ssim_impl(std::span<const double> xs, std::span<const double> ys, int rows, int cols, int window, double c1,
                 double c2, std::span<double> grad_y) {
    require(xs.size() == static_cast<std::size_t>(rows) * cols && ys.size() == xs.size(), "ssim: plane size mismatch");
    require(window >= 1 && window % 2 == 1 && window <= rows && window <= cols, "ssim: invalid window");
    const bool want_grad = !grad_y.empty();
    auto X = [&](int y, int x) { return xs[static_cast<std::size_t>(y) * cols + x]; };
    auto Y = [&](int y, int x) { return ys[static_cast<std::size_t>(y) * cols + x]; };

    Integral sx(rows, cols), sy(rows, cols), sxx(rows, cols), syy(rows, cols), sxy(rows, cols);
    sx.build(rows, cols, X);
    sy.build(rows, cols, Y);
    sxx.build(rows, cols, [&](int y, int x) { return X(y, x) * X(y, x); });
    syy.build(rows, cols, [&](int y, int x) { return Y(y, x) * Y(y, x); });
    sxy.build(rows, cols, [&](int y, int x) { return X(y, x) * Y(y, x); });

    const int prow = rows - window + 1;
    const int pcol = cols - window + 1;
    const double m = static_cast<double>(window) * window;
    const double positions = static_cast<double>(prow) * pcol;

    // Per-window coefficients of d(ssim_p)/d(y_i) = alpha + beta*y_i + gamma*x_i.
    std::vector<double> alpha, beta, gamma;
    if (want_grad) {
        alpha.assign(static_cast<std::size_t>(prow) * pcol, 0.0);
        beta.assign(alpha.size(), 0.0);
        gamma.assign(alpha.size(), 0.0);
    }

    double total = 0.0;
    for (int py = 0; py < prow; ++py) {
        for (int px = 0; px < pcol; ++px) {
            const int y1 = py + window, x1 = px + window;
            const double mx = sx.box(py, px, y1, x1) / m;
            const double my = sy.box(py, px, y1, x1) / m;
            const double vx = sxx.box(py, px, y1, x1) / m - mx * mx;
            const double vy = syy.box(py, px, y1, x1) / m - my * my;
            const double cxy = sxy.box(py, px, y1, x1) / m - mx * my;

            const double n1 = 2.0 * mx * my + c1;
            const double d1 = mx * mx + my * my + c1;
            const double n2 = 2.0 * cxy + c2;
            const double d2 = vx + vy + c2;
            const double lum = n1 / d1;
            const double con = n2 / d2;
            total += lum * con;

            if (want_grad) {
                const double dlum_dmy = (2.0 * mx * d1 - n1 * 2.0 * my) / (d1 * d1);
                const double ds_dmy = con * dlum_dmy;
                const double ds_dcxy = lum * 2.0 / d2;
                const double ds_dvy = -lum * n2 / (d2 * d2);
                const std::size_t p = static_cast<std::size_t>(py) * pcol + px;
                alpha[p] = (ds_dmy - 2.0 * my * ds_dvy - mx * ds_dcxy) / m;
                beta[p] = 2.0 * ds_dvy / m;
                gamma[p] = ds_dcxy / m;
            }
        }
    }

    if (want_grad) {
        require(grad_y.size() == ys.size(), "ssim: gradient buffer size mismatch");
        Integral ia(prow, pcol), ib(prow, pcol), ig(prow, pcol);
        auto coeff = [pcol](const std::vector<double>& v) {
            return [&v, pcol](int y, int x) { return v[static_cast<std::size_t>(y) * pcol + x]; };
        };
        ia.build(prow, pcol, coeff(alpha));
        ib.build(prow, pcol, coeff(beta));
        ig.build(prow, pcol, coeff(gamma));
        for (int y = 0; y < rows; ++y) {
            // Window origins p with p <= y < p + window.
            const int y0 = std::max(0, y - window + 1), y1 = std::min(prow, y + 1);
            for (int x = 0; x < cols; ++x) {
                const int x0 = std::max(0, x - window + 1), x1 = std::min(pcol, x + 1);
                const double a = ia.box(y0, x0, y1, x1);
                const double b = ib.box(y0, x0, y1, x1);
                const double g = ig.box(y0, x0, y1, x1);
                grad_y[static_cast<std::size_t>(y) * cols + x] = (a + b * Y(y, x) + g * X(y, x)) / positions;
            }
        }
    }
    return total / positions;
}

}  // namespace

double ssim(std::span<const double> x, std::span<const double> y, int rows, int cols, int window, double c1,
            double c2) {
    return ssim_impl(x, y, rows, cols, window, c1, c2, {});
}

double ssim_grad(std::span<const double> x, std::span<const double> y, int rows, int cols, int window, double c1,
                 double c2, std::span<double> grad_y) {
    require(!grad_y.empty(), "ssim_grad: gradient buffer required");
    return ssim_impl(x, y, rows, cols, window, c1, c2, grad_y);
}

}  // namespace echoreg
