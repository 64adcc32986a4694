#pragma once

#include <array>
#include <cmath>

namespace qalas {

// Forward-mode dual number carrying derivatives with respect to N parameters.
// Used to push exact parameter derivatives through the affine operator chain.
template <int N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {} // NOLINT: implicit lift of constants
    static Dual variable(double value, int slot)
    {
        Dual x(value);
        x.d[slot] = 1.0;
        return x;
    }
};

template <int N>
inline Dual<N> operator+(const Dual<N>& x, const Dual<N>& y)
{
    Dual<N> r(x.v + y.v);
    for (int i = 0; i < N; ++i) r.d[i] = x.d[i] + y.d[i];
    return r;
}

template <int N>
inline Dual<N> operator-(const Dual<N>& x, const Dual<N>& y)
{
    Dual<N> r(x.v - y.v);
    for (int i = 0; i < N; ++i) r.d[i] = x.d[i] - y.d[i];
    return r;
}

template <int N>
inline Dual<N> operator-(const Dual<N>& x)
{
    Dual<N> r(-x.v);
    for (int i = 0; i < N; ++i) r.d[i] = -x.d[i];
    return r;
}

template <int N>
inline Dual<N> operator*(const Dual<N>& x, const Dual<N>& y)
{
    Dual<N> r(x.v * y.v);
    for (int i = 0; i < N; ++i) r.d[i] = x.d[i] * y.v + x.v * y.d[i];
    return r;
}

template <int N>
inline Dual<N> operator/(const Dual<N>& x, const Dual<N>& y)
{
    Dual<N> r(x.v / y.v);
    const double inv = 1.0 / y.v;
    for (int i = 0; i < N; ++i) r.d[i] = (x.d[i] - r.v * y.d[i]) * inv;
    return r;
}

template <int N> inline Dual<N> operator+(const Dual<N>& x, double c) { return x + Dual<N>(c); }
template <int N> inline Dual<N> operator+(double c, const Dual<N>& x) { return Dual<N>(c) + x; }
template <int N> inline Dual<N> operator-(const Dual<N>& x, double c) { return x - Dual<N>(c); }
template <int N> inline Dual<N> operator-(double c, const Dual<N>& x) { return Dual<N>(c) - x; }
template <int N> inline Dual<N> operator*(const Dual<N>& x, double c) { return x * Dual<N>(c); }
template <int N> inline Dual<N> operator*(double c, const Dual<N>& x) { return Dual<N>(c) * x; }
template <int N> inline Dual<N> operator/(const Dual<N>& x, double c) { return x / Dual<N>(c); }
template <int N> inline Dual<N> operator/(double c, const Dual<N>& x) { return Dual<N>(c) / x; }

template <int N>
inline Dual<N> exp(const Dual<N>& x)
{
    Dual<N> r(std::exp(x.v));
    for (int i = 0; i < N; ++i) r.d[i] = r.v * x.d[i];
    return r;
}

inline double value_of(double x) { return x; }
template <int N> inline double value_of(const Dual<N>& x) { return x.v; }

} // namespace qalas
