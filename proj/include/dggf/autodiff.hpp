// Copyright (c) 2026 dggf authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar automatic differentiation for MLPs.
//
// Input derivatives are computed with second-order forward jets: one tangent
// pass per seeded input coordinate carries (value, d/dx_c, d^2/dx_c^2)
// through the network, which is exactly what the diagonal-Hessian operators
// need. Parameter gradients of losses that contain those derivatives are
// computed by a hand-derived reverse sweep over the jet recursion
// (reverse-over-forward). Points are processed in lanes of 8 so the inner
// loops vectorize.
//
// The recursion per hidden layer, per seeded coordinate c:
//     z    = W a_prev + b
//     a    = act(z)
//     dz_c = W da_prev_c          d2z_c = W d2a_prev_c
//     da_c = act'(z) dz_c         d2a_c = act''(z) dz_c^2 + act'(z) d2z_c
// and its adjoint (bar = adjoint of), using s1..s3 = act'..act''':
//     bar_d2z_c = s1 .* bar_d2a_c
//     bar_dz_c  = s1 .* bar_da_c + 2 s2 .* dz_c .* bar_d2a_c
//     bar_s1    = sum_c (dz_c .* bar_da_c + d2z_c .* bar_d2a_c)
//     bar_s2    = sum_c (dz_c^2 .* bar_d2a_c)
//     bar_z     = s1 .* bar_a + s2 .* bar_s1 + s3 .* bar_s2
//     bar_W    += bar_z (x) a_prev + sum_c bar_dz_c (x) da_prev_c
//                                  + sum_c bar_d2z_c (x) d2a_prev_c
//     bar_b    += bar_z
//     bar_a_prev      = W^T bar_z        (and likewise for the tangents)

#pragma once

#include <array>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "dggf/common.hpp"
#include "dggf/mlp.hpp"

namespace dggf {

inline constexpr int kLanes = 8;
inline constexpr int kMaxSeeds = 8;

// Value, input gradient, and diagonal of the input Hessian at one point.
struct DerivativeBundle {
    double value = 0.0;
    Vec grad;
    Vec hess_diag;
};

// Gradient with respect to every network parameter, in the network's flat
// layer order (shape-congruent with the Mlp it was computed from).
struct ParamGradient {
    std::vector<int> layer_sizes;
    Vec values;

    bool congruent_with(const Mlp& net) const { return layer_sizes == net.layer_sizes(); }
};

inline ParamGradient zero_gradient(const Mlp& net) {
    return ParamGradient{net.layer_sizes(), Vec(static_cast<std::size_t>(net.total_params()), 0.0)};
}

namespace jet {

struct Out {
    double value;
    std::array<double, kMaxSeeds> d1;
    std::array<double, kMaxSeeds> d2;
};

struct Adj {
    double value = 0.0;
    std::array<double, kMaxSeeds> d1{};
    std::array<double, kMaxSeeds> d2{};
};

// Forward state of one lane block. Per layer, arrays are [neuron][lane];
// per-seed arrays are [seed][neuron][lane] flattened.
struct Block {
    int lanes = 0;
    std::vector<int> seeds;
    Vec x;  // [dim][lane]
    struct LayerState {
        Vec a, s1, s2, s3;      // width * kLanes (s1..s3 empty for the affine output layer)
        Vec dz, d2z, da, d2a;   // n_seeds * width * kLanes
    };
    std::vector<LayerState> layers;
};

inline double sum_lanes(const double* v) {
    return ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
}

// Forward pass over up to kLanes points (row-major xs, one point per row).
// Lanes beyond n are padded with point 0 and ignored on output.
inline void forward_block(const Mlp& net, const double* xs, int n, std::span<const int> seeds,
                          Block& ws, Out* outs) {
    const int dim = net.input_dim();
    const int L = net.layer_count();
    const int ns = static_cast<int>(seeds.size());
    const Activation act = net.activation();

    ws.lanes = n;
    ws.seeds.assign(seeds.begin(), seeds.end());
    ws.x.resize(static_cast<std::size_t>(dim) * kLanes);
    for (int i = 0; i < dim; ++i)
        for (int p = 0; p < kLanes; ++p)
            ws.x[static_cast<std::size_t>(i) * kLanes + p] = xs[static_cast<std::size_t>(p < n ? p : 0) * dim + i];

    ws.layers.resize(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        auto& st = ws.layers[static_cast<std::size_t>(l)];
        const std::size_t wlanes = static_cast<std::size_t>(net.out_size(l)) * kLanes;
        st.a.resize(wlanes);
        if (l + 1 < L) {
            st.s1.resize(wlanes);
            st.s2.resize(wlanes);
            st.s3.resize(wlanes);
        }
        st.dz.resize(static_cast<std::size_t>(ns) * wlanes);
        st.d2z.resize(static_cast<std::size_t>(ns) * wlanes);
        st.da.resize(static_cast<std::size_t>(ns) * wlanes);
        st.d2a.resize(static_cast<std::size_t>(ns) * wlanes);
    }

    for (int l = 0; l < L; ++l) {
        auto& st = ws.layers[static_cast<std::size_t>(l)];
        const int in = net.in_size(l), out = net.out_size(l);
        const double* W = net.weights(l);
        const double* b = net.biases(l);
        const bool first = (l == 0);
        const double* a_prev = first ? ws.x.data() : ws.layers[static_cast<std::size_t>(l) - 1].a.data();
        const auto* prev = first ? nullptr : &ws.layers[static_cast<std::size_t>(l) - 1];
        const std::size_t wl = static_cast<std::size_t>(out) * kLanes;

        for (int o = 0; o < out; ++o) {
            const double* row = W + static_cast<std::size_t>(o) * in;
            double zacc[kLanes];
            for (int p = 0; p < kLanes; ++p) zacc[p] = b[o];
            for (int i = 0; i < in; ++i) {
                const double w = row[i];
                const double* av = a_prev + static_cast<std::size_t>(i) * kLanes;
                for (int p = 0; p < kLanes; ++p) zacc[p] += w * av[p];
            }
            double* zrow = &st.a[static_cast<std::size_t>(o) * kLanes];  // holds z until activation
            for (int p = 0; p < kLanes; ++p) zrow[p] = zacc[p];

            for (int c = 0; c < ns; ++c) {
                double* dzr = &st.dz[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                double* d2zr = &st.d2z[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                if (first) {
                    // da_prev is the unit vector of the seeded coordinate.
                    const double wc = row[seeds[static_cast<std::size_t>(c)]];
                    for (int p = 0; p < kLanes; ++p) dzr[p] = wc;
                    for (int p = 0; p < kLanes; ++p) d2zr[p] = 0.0;
                } else {
                    const std::size_t wprev = static_cast<std::size_t>(in) * kLanes;
                    const double* dap = &prev->da[static_cast<std::size_t>(c) * wprev];
                    const double* d2ap = &prev->d2a[static_cast<std::size_t>(c) * wprev];
                    double dacc[kLanes], d2acc[kLanes];
                    for (int p = 0; p < kLanes; ++p) dacc[p] = 0.0;
                    for (int p = 0; p < kLanes; ++p) d2acc[p] = 0.0;
                    for (int i = 0; i < in; ++i) {
                        const double w = row[i];
                        const double* dv = dap + static_cast<std::size_t>(i) * kLanes;
                        const double* d2v = d2ap + static_cast<std::size_t>(i) * kLanes;
                        for (int p = 0; p < kLanes; ++p) dacc[p] += w * dv[p];
                        for (int p = 0; p < kLanes; ++p) d2acc[p] += w * d2v[p];
                    }
                    for (int p = 0; p < kLanes; ++p) dzr[p] = dacc[p];
                    for (int p = 0; p < kLanes; ++p) d2zr[p] = d2acc[p];
                }
            }
        }

        if (l + 1 < L) {
            for (int o = 0; o < out; ++o) {
                double* zrow = &st.a[static_cast<std::size_t>(o) * kLanes];
                double* s1r = &st.s1[static_cast<std::size_t>(o) * kLanes];
                double* s2r = &st.s2[static_cast<std::size_t>(o) * kLanes];
                double* s3r = &st.s3[static_cast<std::size_t>(o) * kLanes];
                for (int p = 0; p < kLanes; ++p) {
                    const ActDerivs d = act_derivs(act, zrow[p]);
                    zrow[p] = d.a;
                    s1r[p] = d.s1;
                    s2r[p] = d.s2;
                    s3r[p] = d.s3;
                }
                for (int c = 0; c < ns; ++c) {
                    double* dzr = &st.dz[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                    double* d2zr = &st.d2z[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                    double* dar = &st.da[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                    double* d2ar = &st.d2a[static_cast<std::size_t>(c) * wl + static_cast<std::size_t>(o) * kLanes];
                    for (int p = 0; p < kLanes; ++p) {
                        dar[p] = s1r[p] * dzr[p];
                        d2ar[p] = s2r[p] * dzr[p] * dzr[p] + s1r[p] * d2zr[p];
                    }
                }
            }
        } else {
            // Affine output: post-activation tangents equal pre-activation ones.
            for (int c = 0; c < ns; ++c) {
                std::memcpy(&st.da[static_cast<std::size_t>(c) * wl], &st.dz[static_cast<std::size_t>(c) * wl],
                            wl * sizeof(double));
                std::memcpy(&st.d2a[static_cast<std::size_t>(c) * wl], &st.d2z[static_cast<std::size_t>(c) * wl],
                            wl * sizeof(double));
            }
        }
    }

    if (outs) {
        const auto& last = ws.layers.back();
        for (int p = 0; p < n; ++p) {
            outs[p].value = last.a[static_cast<std::size_t>(p)];
            for (int c = 0; c < ns; ++c) {
                outs[p].d1[static_cast<std::size_t>(c)] = last.da[static_cast<std::size_t>(c) * kLanes + p];
                outs[p].d2[static_cast<std::size_t>(c)] = last.d2a[static_cast<std::size_t>(c) * kLanes + p];
            }
        }
    }
}

// Scratch buffers for the reverse sweep, reusable across blocks.
struct ReverseScratch {
    Vec bar_a, bar_da, bar_d2a;     // adjoints of layer outputs
    Vec bar_z, bar_dz, bar_d2z;     // adjoints of pre-activations
    Vec nbar_a, nbar_da, nbar_d2a;  // adjoints propagated to the previous layer
};

// Reverse sweep; accumulates d(loss)/d(params) into grad (flat layout).
// adjs holds per-lane adjoints of (value, d1[c], d2[c]); padded lanes must
// carry zero adjoints.
inline void reverse_block(const Mlp& net, const Block& ws, const Adj* adjs, int n, Vec& grad,
                          ReverseScratch& rs) {
    const int L = net.layer_count();
    const int ns = static_cast<int>(ws.seeds.size());
    int maxw = net.input_dim();
    for (int s : net.layer_sizes()) maxw = std::max(maxw, s);
    const std::size_t cap = static_cast<std::size_t>(maxw) * kLanes;
    const std::size_t scap = static_cast<std::size_t>(ns) * cap;
    rs.bar_a.assign(cap, 0.0);
    rs.bar_da.assign(scap, 0.0);
    rs.bar_d2a.assign(scap, 0.0);
    rs.bar_z.resize(cap);
    rs.bar_dz.resize(scap);
    rs.bar_d2z.resize(scap);
    rs.nbar_a.resize(cap);
    rs.nbar_da.resize(scap);
    rs.nbar_d2a.resize(scap);

    // Seed output adjoints (output width is 1).
    for (int p = 0; p < kLanes; ++p) {
        rs.bar_a[static_cast<std::size_t>(p)] = p < n ? adjs[p].value : 0.0;
        for (int c = 0; c < ns; ++c) {
            rs.bar_da[static_cast<std::size_t>(c) * kLanes + p] = p < n ? adjs[p].d1[static_cast<std::size_t>(c)] : 0.0;
            rs.bar_d2a[static_cast<std::size_t>(c) * kLanes + p] = p < n ? adjs[p].d2[static_cast<std::size_t>(c)] : 0.0;
        }
    }

    for (int l = L - 1; l >= 0; --l) {
        const auto& st = ws.layers[static_cast<std::size_t>(l)];
        const int in = net.in_size(l), out = net.out_size(l);
        const std::size_t wl = static_cast<std::size_t>(out) * kLanes;
        const bool has_act = (l + 1 < L);
        const bool first = (l == 0);
        const double* W = net.weights(l);
        double* Wg = grad.data() + net.weight_offset(l);
        double* bg = grad.data() + net.bias_offset(l);

        // (1) adjoints of pre-activation quantities
        if (has_act) {
            for (int o = 0; o < out; ++o) {
                const std::size_t ro = static_cast<std::size_t>(o) * kLanes;
                const double* s1 = &st.s1[ro];
                const double* s2 = &st.s2[ro];
                const double* s3 = &st.s3[ro];
                double zb[kLanes];
                for (int p = 0; p < kLanes; ++p) zb[p] = s1[p] * rs.bar_a[ro + static_cast<std::size_t>(p)];
                for (int c = 0; c < ns; ++c) {
                    const std::size_t rc = static_cast<std::size_t>(c) * wl + ro;
                    const double* dz = &st.dz[rc];
                    const double* d2z = &st.d2z[rc];
                    const double* bda = &rs.bar_da[rc];
                    const double* bd2a = &rs.bar_d2a[rc];
                    double* bdz = &rs.bar_dz[rc];
                    double* bd2z = &rs.bar_d2z[rc];
                    for (int p = 0; p < kLanes; ++p) {
                        bd2z[p] = s1[p] * bd2a[p];
                        bdz[p] = s1[p] * bda[p] + 2.0 * s2[p] * dz[p] * bd2a[p];
                        // bar_s1 and bar_s2 folded straight into bar_z
                        zb[p] += s2[p] * (dz[p] * bda[p] + d2z[p] * bd2a[p]) + s3[p] * dz[p] * dz[p] * bd2a[p];
                    }
                }
                for (int p = 0; p < kLanes; ++p) rs.bar_z[ro + static_cast<std::size_t>(p)] = zb[p];
            }
        } else {
            std::memcpy(rs.bar_z.data(), rs.bar_a.data(), wl * sizeof(double));
            std::memcpy(rs.bar_dz.data(), rs.bar_da.data(), static_cast<std::size_t>(ns) * wl * sizeof(double));
            std::memcpy(rs.bar_d2z.data(), rs.bar_d2a.data(), static_cast<std::size_t>(ns) * wl * sizeof(double));
        }

        // (2) parameter gradients
        const double* a_prev = first ? ws.x.data() : ws.layers[static_cast<std::size_t>(l) - 1].a.data();
        const auto* prev = first ? nullptr : &ws.layers[static_cast<std::size_t>(l) - 1];
        const std::size_t wprev = static_cast<std::size_t>(in) * kLanes;
        for (int o = 0; o < out; ++o) {
            const std::size_t ro = static_cast<std::size_t>(o) * kLanes;
            bg[o] += sum_lanes(&rs.bar_z[ro]);
            double* wrow = Wg + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) {
                const double* ap = a_prev + static_cast<std::size_t>(i) * kLanes;
                double acc[kLanes];
                const double* zb = &rs.bar_z[ro];
                for (int p = 0; p < kLanes; ++p) acc[p] = zb[p] * ap[p];
                if (!first) {
                    for (int c = 0; c < ns; ++c) {
                        const std::size_t rc = static_cast<std::size_t>(c) * wl + ro;
                        const double* dap = &prev->da[static_cast<std::size_t>(c) * wprev + static_cast<std::size_t>(i) * kLanes];
                        const double* d2ap = &prev->d2a[static_cast<std::size_t>(c) * wprev + static_cast<std::size_t>(i) * kLanes];
                        const double* bdz = &rs.bar_dz[rc];
                        const double* bd2z = &rs.bar_d2z[rc];
                        for (int p = 0; p < kLanes; ++p) acc[p] += bdz[p] * dap[p] + bd2z[p] * d2ap[p];
                    }
                }
                wrow[i] += sum_lanes(acc);
            }
            if (first) {
                // da_prev is the seed unit vector; d2a_prev is zero.
                for (int c = 0; c < ns; ++c) {
                    const std::size_t rc = static_cast<std::size_t>(c) * wl + ro;
                    wrow[ws.seeds[static_cast<std::size_t>(c)]] += sum_lanes(&rs.bar_dz[rc]);
                }
            }
        }

        // (3) propagate adjoints to the previous layer's outputs
        if (!first) {
            const std::size_t pin = static_cast<std::size_t>(in) * kLanes;
            std::memset(rs.nbar_a.data(), 0, pin * sizeof(double));
            std::memset(rs.nbar_da.data(), 0, static_cast<std::size_t>(ns) * pin * sizeof(double));
            std::memset(rs.nbar_d2a.data(), 0, static_cast<std::size_t>(ns) * pin * sizeof(double));
            for (int o = 0; o < out; ++o) {
                const double* row = W + static_cast<std::size_t>(o) * in;
                const std::size_t ro = static_cast<std::size_t>(o) * kLanes;
                const double* zb = &rs.bar_z[ro];
                for (int i = 0; i < in; ++i) {
                    const double w = row[i];
                    double* na = &rs.nbar_a[static_cast<std::size_t>(i) * kLanes];
                    for (int p = 0; p < kLanes; ++p) na[p] += w * zb[p];
                }
                for (int c = 0; c < ns; ++c) {
                    const std::size_t rc = static_cast<std::size_t>(c) * wl + ro;
                    const double* bdz = &rs.bar_dz[rc];
                    const double* bd2z = &rs.bar_d2z[rc];
                    for (int i = 0; i < in; ++i) {
                        const double w = row[i];
                        double* nda = &rs.nbar_da[static_cast<std::size_t>(c) * pin + static_cast<std::size_t>(i) * kLanes];
                        double* nd2a = &rs.nbar_d2a[static_cast<std::size_t>(c) * pin + static_cast<std::size_t>(i) * kLanes];
                        for (int p = 0; p < kLanes; ++p) nda[p] += w * bdz[p];
                        for (int p = 0; p < kLanes; ++p) nd2a[p] += w * bd2z[p];
                    }
                }
            }
            rs.bar_a.swap(rs.nbar_a);
            rs.bar_da.swap(rs.nbar_da);
            rs.bar_d2a.swap(rs.nbar_d2a);
        }
    }
}

}  // namespace jet

// ---------------------------------------------------------------------------
// Public single-point entry points
// ---------------------------------------------------------------------------

// Exact value, gradient, and Hessian diagonal with respect to the inputs.
inline DerivativeBundle eval_with_derivatives(const Mlp& net, std::span<const double> x) {
    const int dim = net.input_dim();
    if (static_cast<int>(x.size()) != dim)
        throw DimensionError("eval_with_derivatives: input size " + std::to_string(x.size()) +
                             " != network input dim " + std::to_string(dim));
    std::vector<int> seeds(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) seeds[static_cast<std::size_t>(i)] = i;
    jet::Block ws;
    jet::Out out;
    jet::forward_block(net, x.data(), 1, seeds, ws, &out);
    DerivativeBundle b;
    b.value = out.value;
    b.grad.assign(static_cast<std::size_t>(dim), 0.0);
    b.hess_diag.assign(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i) {
        b.grad[static_cast<std::size_t>(i)] = out.d1[static_cast<std::size_t>(i)];
        b.hess_diag[static_cast<std::size_t>(i)] = out.d2[static_cast<std::size_t>(i)];
    }
    return b;
}

// Central finite differences against the same evaluation path; the report is
// the test harness for eval_with_derivatives. Discrepancies are normalized by
// max(1, largest finite-difference entry of the same quantity).
struct FdReport {
    Vec grad_fd, hess_fd;
    Vec grad_rel, hess_rel;
    double max_grad_rel = 0.0;
    double max_hess_rel = 0.0;
    double max_rel = 0.0;
};

inline FdReport finite_difference_check(const Mlp& net, std::span<const double> x, double step) {
    if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be > 0");
    const int dim = net.input_dim();
    const DerivativeBundle ad = eval_with_derivatives(net, x);
    FdReport rep;
    rep.grad_fd.resize(static_cast<std::size_t>(dim));
    rep.hess_fd.resize(static_cast<std::size_t>(dim));
    rep.grad_rel.resize(static_cast<std::size_t>(dim));
    rep.hess_rel.resize(static_cast<std::size_t>(dim));
    Vec xp(x.begin(), x.end());
    const double u0 = forward(net, xp);
    for (int i = 0; i < dim; ++i) {
        const double xi = xp[static_cast<std::size_t>(i)];
        xp[static_cast<std::size_t>(i)] = xi + step;
        const double up = forward(net, xp);
        xp[static_cast<std::size_t>(i)] = xi - step;
        const double um = forward(net, xp);
        xp[static_cast<std::size_t>(i)] = xi;
        rep.grad_fd[static_cast<std::size_t>(i)] = (up - um) / (2.0 * step);
        rep.hess_fd[static_cast<std::size_t>(i)] = (up - 2.0 * u0 + um) / (step * step);
    }
    double gscale = 1.0, hscale = 1.0;
    for (int i = 0; i < dim; ++i) {
        gscale = std::max(gscale, std::abs(rep.grad_fd[static_cast<std::size_t>(i)]));
        hscale = std::max(hscale, std::abs(rep.hess_fd[static_cast<std::size_t>(i)]));
    }
    for (int i = 0; i < dim; ++i) {
        rep.grad_rel[static_cast<std::size_t>(i)] =
            std::abs(ad.grad[static_cast<std::size_t>(i)] - rep.grad_fd[static_cast<std::size_t>(i)]) / gscale;
        rep.hess_rel[static_cast<std::size_t>(i)] =
            std::abs(ad.hess_diag[static_cast<std::size_t>(i)] - rep.hess_fd[static_cast<std::size_t>(i)]) / hscale;
        rep.max_grad_rel = std::max(rep.max_grad_rel, rep.grad_rel[static_cast<std::size_t>(i)]);
        rep.max_hess_rel = std::max(rep.max_hess_rel, rep.hess_rel[static_cast<std::size_t>(i)]);
    }
    rep.max_rel = std::max(rep.max_grad_rel, rep.max_hess_rel);
    return rep;
}

// ---------------------------------------------------------------------------
// LossGraph
//
// A small recorded computation over network evaluations, constants, and raw
// parameters: just enough primitives for the training losses. forward()
// materializes values (network evaluations run in lane blocks); gradient()
// runs the scalar adjoint sweep and then the jet reverse sweep per block.
// ---------------------------------------------------------------------------

using NodeId = std::int32_t;

enum class Prim : std::uint8_t { Constant, Param, Eval, Add, Sub, Mul, Scale, Square, Abs };

inline const char* prim_name(Prim p) {
    switch (p) {
        case Prim::Constant: return "const";
        case Prim::Param: return "param";
        case Prim::Eval: return "eval";
        case Prim::Add: return "add";
        case Prim::Sub: return "sub";
        case Prim::Mul: return "mul";
        case Prim::Scale: return "scale";
        case Prim::Square: return "square";
        case Prim::Abs: return "abs";
    }
    return "?";
}

struct EvalHandle {
    NodeId base = -1;
    int n_seeds = 0;
    NodeId value() const { return base; }
    NodeId d1(int c) const { return base + 1 + c; }
    NodeId d2(int c) const { return base + 1 + n_seeds + c; }
};

class LossGraph {
public:
    explicit LossGraph(const Mlp& net) : net_(&net) {}

    void reset() {
        nodes_.clear();
        vals_.clear();
        adjs_.clear();
        evals_.clear();
        xs_.clear();
        groups_.clear();
        evaluated_ = false;
    }

    const Mlp& net() const { return *net_; }

    NodeId constant(double c) { return push(Prim::Constant, -1, -1, c); }

    NodeId param(std::int64_t flat_index) {
        if (flat_index < 0 || flat_index >= net_->total_params()) throw DimensionError("param index out of range");
        return push(Prim::Param, static_cast<NodeId>(flat_index), -1, 0.0);
    }

    // Records a network evaluation at x with second-order tangents for the
    // given input coordinates. Outputs become graph nodes.
    EvalHandle eval(std::span<const double> x, std::span<const int> seed_coords) {
        if (static_cast<int>(x.size()) != net_->input_dim())
            throw DimensionError("loss graph eval: input dim mismatch");
        if (static_cast<int>(seed_coords.size()) > kMaxSeeds) throw DimensionError("too many seeded coordinates");
        for (int c : seed_coords)
            if (c < 0 || c >= net_->input_dim()) throw DimensionError("seed coordinate out of range");

        EvalRecord rec;
        rec.x_off = xs_.size();
        xs_.insert(xs_.end(), x.begin(), x.end());
        rec.group = group_of(seed_coords);
        rec.first_node = static_cast<NodeId>(nodes_.size());
        evals_.push_back(rec);

        EvalHandle h;
        h.base = rec.first_node;
        h.n_seeds = static_cast<int>(seed_coords.size());
        const int outs = 1 + 2 * h.n_seeds;
        for (int k = 0; k < outs; ++k) push(Prim::Eval, static_cast<NodeId>(evals_.size() - 1), k, 0.0);
        return h;
    }

    NodeId add(NodeId a, NodeId b) { return push(Prim::Add, a, b, 0.0); }
    NodeId sub(NodeId a, NodeId b) { return push(Prim::Sub, a, b, 0.0); }
    NodeId mul(NodeId a, NodeId b) { return push(Prim::Mul, a, b, 0.0); }
    NodeId scale(NodeId a, double c) { return push(Prim::Scale, a, -1, c); }
    NodeId square(NodeId a) { return push(Prim::Square, a, -1, 0.0); }
    // abs is available for diagnostics/metrics; the gradient pass rejects it.
    NodeId abs(NodeId a) { return push(Prim::Abs, a, -1, 0.0); }

    NodeId sum(std::span<const NodeId> ids) {
        if (ids.empty()) return constant(0.0);
        NodeId acc = ids[0];
        for (std::size_t i = 1; i < ids.size(); ++i) acc = add(acc, ids[i]);
        return acc;
    }

    // Materializes all node values. Network evaluations run grouped by seed
    // signature in lane blocks; their forward state is kept for gradient().
    void forward() {
        vals_.assign(nodes_.size(), 0.0);
        run_eval_groups(/*store=*/true);
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& nd = nodes_[i];
            switch (nd.op) {
                case Prim::Constant: vals_[i] = nd.c; break;
                case Prim::Param: vals_[i] = net_->params()[static_cast<std::size_t>(nd.a)]; break;
                case Prim::Eval: break;  // already written by run_eval_groups
                case Prim::Add: vals_[i] = vals_[static_cast<std::size_t>(nd.a)] + vals_[static_cast<std::size_t>(nd.b)]; break;
                case Prim::Sub: vals_[i] = vals_[static_cast<std::size_t>(nd.a)] - vals_[static_cast<std::size_t>(nd.b)]; break;
                case Prim::Mul: vals_[i] = vals_[static_cast<std::size_t>(nd.a)] * vals_[static_cast<std::size_t>(nd.b)]; break;
                case Prim::Scale: vals_[i] = nd.c * vals_[static_cast<std::size_t>(nd.a)]; break;
                case Prim::Square: {
                    const double v = vals_[static_cast<std::size_t>(nd.a)];
                    vals_[i] = v * v;
                    break;
                }
                case Prim::Abs: vals_[i] = std::abs(vals_[static_cast<std::size_t>(nd.a)]); break;
                default: throw UnsupportedPrimitiveError(prim_name(nd.op));
            }
        }
        evaluated_ = true;
    }

    double value(NodeId id) const {
        if (!evaluated_) throw Error("loss graph: forward() has not been run");
        return vals_[static_cast<std::size_t>(id)];
    }

    // d(root)/d(theta) for every network parameter.
    ParamGradient gradient(NodeId root) {
        if (!evaluated_) forward();
        adjs_.assign(nodes_.size(), 0.0);
        adjs_[static_cast<std::size_t>(root)] = 1.0;
        ParamGradient grad = zero_gradient(*net_);
        for (std::size_t ii = nodes_.size(); ii-- > 0;) {
            const Node& nd = nodes_[ii];
            const double a = adjs_[ii];
            if (a == 0.0 && nd.op != Prim::Eval) continue;
            switch (nd.op) {
                case Prim::Constant:
                case Prim::Eval:
                    break;  // eval adjoints are consumed by the jet sweep below
                case Prim::Param:
                    grad.values[static_cast<std::size_t>(nd.a)] += a;
                    break;
                case Prim::Add:
                    adjs_[static_cast<std::size_t>(nd.a)] += a;
                    adjs_[static_cast<std::size_t>(nd.b)] += a;
                    break;
                case Prim::Sub:
                    adjs_[static_cast<std::size_t>(nd.a)] += a;
                    adjs_[static_cast<std::size_t>(nd.b)] -= a;
                    break;
                case Prim::Mul:
                    adjs_[static_cast<std::size_t>(nd.a)] += a * vals_[static_cast<std::size_t>(nd.b)];
                    adjs_[static_cast<std::size_t>(nd.b)] += a * vals_[static_cast<std::size_t>(nd.a)];
                    break;
                case Prim::Scale:
                    adjs_[static_cast<std::size_t>(nd.a)] += a * nd.c;
                    break;
                case Prim::Square:
                    adjs_[static_cast<std::size_t>(nd.a)] += 2.0 * a * vals_[static_cast<std::size_t>(nd.a)];
                    break;
                case Prim::Abs:
                    if (a != 0.0) throw UnsupportedPrimitiveError("abs");
                    break;
                default:
                    throw UnsupportedPrimitiveError(prim_name(nd.op));
            }
        }
        reverse_eval_groups(grad.values);
        return grad;
    }

private:
    struct Node {
        Prim op;
        NodeId a, b;
        double c;
    };

    struct EvalRecord {
        std::size_t x_off = 0;
        int group = -1;
        NodeId first_node = -1;
    };

    struct Group {
        std::vector<int> seeds;
        std::vector<int> members;  // eval record indices in insertion order
    };

    NodeId push(Prim op, NodeId a, NodeId b, double c) {
        nodes_.push_back(Node{op, a, b, c});
        evaluated_ = false;
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    int group_of(std::span<const int> seeds) {
        for (std::size_t g = 0; g < groups_.size(); ++g)
            if (std::equal(groups_[g].seeds.begin(), groups_[g].seeds.end(), seeds.begin(), seeds.end()) &&
                groups_[g].seeds.size() == seeds.size())
                return static_cast<int>(g);
        groups_.push_back(Group{std::vector<int>(seeds.begin(), seeds.end()), {}});
        return static_cast<int>(groups_.size() - 1);
    }

    void assign_members() {
        for (auto& g : groups_) g.members.clear();
        for (std::size_t r = 0; r < evals_.size(); ++r)
            groups_[static_cast<std::size_t>(evals_[r].group)].members.push_back(static_cast<int>(r));
    }

    // Enumerates lane blocks as (group, first member index) pairs.
    struct BlockRef {
        int group;
        int member_begin;
        int count;
    };

    std::vector<BlockRef> enumerate_blocks() const {
        std::vector<BlockRef> blocks;
        for (std::size_t g = 0; g < groups_.size(); ++g) {
            const int n = static_cast<int>(groups_[g].members.size());
            for (int at = 0; at < n; at += kLanes)
                blocks.push_back(BlockRef{static_cast<int>(g), at, std::min(kLanes, n - at)});
        }
        return blocks;
    }

    void run_eval_groups(bool store) {
        assign_members();
        const auto blocks = enumerate_blocks();
        if (store) block_ws_.resize(blocks.size());
        const int dim = net_->input_dim();

        const int shards = std::max(1, std::min<int>(16, static_cast<int>(blocks.size())));
        run_blocks(shards, [&](int shard) {
            Vec xbuf;
            std::array<jet::Out, kLanes> outs;
            for (std::size_t bi = static_cast<std::size_t>(shard); bi < blocks.size();
                 bi += static_cast<std::size_t>(shards)) {
                const BlockRef& br = blocks[bi];
                const Group& grp = groups_[static_cast<std::size_t>(br.group)];
                xbuf.resize(static_cast<std::size_t>(br.count) * dim);
                for (int k = 0; k < br.count; ++k) {
                    const EvalRecord& rec = evals_[static_cast<std::size_t>(grp.members[static_cast<std::size_t>(br.member_begin + k)])];
                    std::memcpy(&xbuf[static_cast<std::size_t>(k) * dim], &xs_[rec.x_off],
                                static_cast<std::size_t>(dim) * sizeof(double));
                }
                jet::Block local;
                jet::Block& ws = store ? block_ws_[bi] : local;
                jet::forward_block(*net_, xbuf.data(), br.count, grp.seeds, ws, outs.data());
                const int nsd = static_cast<int>(grp.seeds.size());
                for (int k = 0; k < br.count; ++k) {
                    const EvalRecord& rec = evals_[static_cast<std::size_t>(grp.members[static_cast<std::size_t>(br.member_begin + k)])];
                    vals_[static_cast<std::size_t>(rec.first_node)] = outs[static_cast<std::size_t>(k)].value;
                    for (int c = 0; c < nsd; ++c) {
                        vals_[static_cast<std::size_t>(rec.first_node) + 1 + static_cast<std::size_t>(c)] =
                            outs[static_cast<std::size_t>(k)].d1[static_cast<std::size_t>(c)];
                        vals_[static_cast<std::size_t>(rec.first_node) + 1 + static_cast<std::size_t>(nsd + c)] =
                            outs[static_cast<std::size_t>(k)].d2[static_cast<std::size_t>(c)];
                    }
                }
            }
        });
    }

    void reverse_eval_groups(Vec& grad_out) {
        const auto blocks = enumerate_blocks();
        if (block_ws_.size() != blocks.size()) throw Error("loss graph: gradient() before forward()");
        const int shards = std::max(1, std::min<int>(16, static_cast<int>(blocks.size())));
        std::vector<Vec> shard_grads(static_cast<std::size_t>(shards));

        run_blocks(shards, [&](int shard) {
            Vec& g = shard_grads[static_cast<std::size_t>(shard)];
            g.assign(static_cast<std::size_t>(net_->total_params()), 0.0);
            jet::ReverseScratch rs;
            std::array<jet::Adj, kLanes> adj;
            for (std::size_t bi = static_cast<std::size_t>(shard); bi < blocks.size();
                 bi += static_cast<std::size_t>(shards)) {
                const BlockRef& br = blocks[bi];
                const Group& grp = groups_[static_cast<std::size_t>(br.group)];
                const int nsd = static_cast<int>(grp.seeds.size());
                bool any = false;
                for (int k = 0; k < kLanes; ++k) adj[static_cast<std::size_t>(k)] = jet::Adj{};
                for (int k = 0; k < br.count; ++k) {
                    const EvalRecord& rec = evals_[static_cast<std::size_t>(grp.members[static_cast<std::size_t>(br.member_begin + k)])];
                    auto& a = adj[static_cast<std::size_t>(k)];
                    a.value = adjs_[static_cast<std::size_t>(rec.first_node)];
                    any = any || a.value != 0.0;
                    for (int c = 0; c < nsd; ++c) {
                        a.d1[static_cast<std::size_t>(c)] =
                            adjs_[static_cast<std::size_t>(rec.first_node) + 1 + static_cast<std::size_t>(c)];
                        a.d2[static_cast<std::size_t>(c)] =
                            adjs_[static_cast<std::size_t>(rec.first_node) + 1 + static_cast<std::size_t>(nsd + c)];
                        any = any || a.d1[static_cast<std::size_t>(c)] != 0.0 || a.d2[static_cast<std::size_t>(c)] != 0.0;
                    }
                }
                if (any) jet::reverse_block(*net_, block_ws_[bi], adj.data(), br.count, g, rs);
            }
        });

        for (const Vec& g : shard_grads)
            for (std::size_t i = 0; i < grad_out.size(); ++i) grad_out[i] += g[i];
    }

    const Mlp* net_;
    std::vector<Node> nodes_;
    Vec vals_, adjs_;
    std::vector<EvalRecord> evals_;
    Vec xs_;
    std::vector<Group> groups_;
    std::vector<jet::Block> block_ws_;
    bool evaluated_ = false;
};

// Gradient of a loss expressed as a graph builder: the builder receives the
// graph and returns the root node of the scalar loss.
template <typename Builder>
ParamGradient loss_param_gradient(const Mlp& net, Builder&& build) {
    LossGraph g(net);
    const NodeId root = build(g);
    g.forward();
    return g.gradient(root);
}

}  // namespace dggf
