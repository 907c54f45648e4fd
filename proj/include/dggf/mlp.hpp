// Copyright (c) 2026 dggf authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar-output fully connected networks: definition, initialization,
// evaluation, and the on-disk model format.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dggf/common.hpp"

#include <nlohmann/json.hpp>

namespace dggf {

enum class Activation : std::uint8_t { Tanh, Sine, Softplus, Square, Relu };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Tanh: return "tanh";
        case Activation::Sine: return "sine";
        case Activation::Softplus: return "softplus";
        case Activation::Square: return "square";
        case Activation::Relu: return "relu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "sine") return Activation::Sine;
    if (s == "softplus") return Activation::Softplus;
    if (s == "square") return Activation::Square;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation: " + s);
}

// Activation value and its first three derivatives, all recoverable from z.
// Relu is rejected at network construction time: every training loss here
// differentiates the network twice in its inputs, and a piecewise-linear
// activation has zero second derivative almost everywhere.
struct ActDerivs {
    double a, s1, s2, s3;
};

inline ActDerivs act_derivs(Activation act, double z) {
    switch (act) {
        case Activation::Tanh: {
            const double t = std::tanh(z);
            const double s1 = 1.0 - t * t;
            return {t, s1, -2.0 * t * s1, s1 * (6.0 * t * t - 2.0)};
        }
        case Activation::Sine: {
            const double s = std::sin(z), c = std::cos(z);
            return {s, c, -s, -c};
        }
        case Activation::Softplus: {
            // log(1+e^z) written to stay finite for |z| large.
            const double a = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
            const double s = 1.0 / (1.0 + std::exp(-z));
            const double s2 = s * (1.0 - s);
            return {a, s, s2, s2 * (1.0 - 2.0 * s)};
        }
        case Activation::Square:
            return {z * z, 2.0 * z, 2.0, 0.0};
        case Activation::Relu:
            break;
    }
    throw Error("relu has no usable second derivative");
}

// ---------------------------------------------------------------------------
// Mlp
//
// Parameters live in one flat array; layer l occupies a row-major
// [out x in] weight block followed by an out-sized bias block. The final
// layer is affine with no activation and its output size is always 1.
// ---------------------------------------------------------------------------

class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<int> layer_sizes, Activation act)
        : layer_sizes_(std::move(layer_sizes)), act_(act) {
        validate();
        params_.assign(static_cast<std::size_t>(total_params()), 0.0);
        build_offsets();
    }

    const std::vector<int>& layer_sizes() const { return layer_sizes_; }
    Activation activation() const { return act_; }
    int input_dim() const { return layer_sizes_.front(); }
    int layer_count() const { return static_cast<int>(layer_sizes_.size()) - 1; }
    int hidden_count() const { return layer_count() - 1; }

    Vec& params() { return params_; }
    const Vec& params() const { return params_; }
    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (int l = 0; l + 1 < static_cast<int>(layer_sizes_.size()); ++l)
            n += static_cast<std::int64_t>(layer_sizes_[l + 1]) * layer_sizes_[l] + layer_sizes_[l + 1];
        return n;
    }

    int in_size(int layer) const { return layer_sizes_[static_cast<std::size_t>(layer)]; }
    int out_size(int layer) const { return layer_sizes_[static_cast<std::size_t>(layer) + 1]; }

    const double* weights(int layer) const { return params_.data() + w_off_[static_cast<std::size_t>(layer)]; }
    double* weights(int layer) { return params_.data() + w_off_[static_cast<std::size_t>(layer)]; }
    const double* biases(int layer) const { return params_.data() + b_off_[static_cast<std::size_t>(layer)]; }
    double* biases(int layer) { return params_.data() + b_off_[static_cast<std::size_t>(layer)]; }
    std::int64_t weight_offset(int layer) const { return w_off_[static_cast<std::size_t>(layer)]; }
    std::int64_t bias_offset(int layer) const { return b_off_[static_cast<std::size_t>(layer)]; }

    bool same_shape(const Mlp& other) const {
        return layer_sizes_ == other.layer_sizes_ && act_ == other.act_;
    }

    std::string param_digest() const { return digest_of(params_); }

private:
    void validate() const {
        if (layer_sizes_.size() < 2) throw ConfigError("network needs at least input and output sizes");
        for (int s : layer_sizes_)
            if (s <= 0) throw ConfigError("non-positive layer size");
        if (layer_sizes_.back() != 1) throw ConfigError("output dimension must be 1");
        if (act_ == Activation::Relu)
            throw ConfigError("relu is not twice differentiable; use tanh, sine, or softplus");
    }

    void build_offsets() {
        w_off_.clear();
        b_off_.clear();
        std::int64_t off = 0;
        for (int l = 0; l + 1 < static_cast<int>(layer_sizes_.size()); ++l) {
            w_off_.push_back(off);
            off += static_cast<std::int64_t>(layer_sizes_[l + 1]) * layer_sizes_[l];
            b_off_.push_back(off);
            off += layer_sizes_[l + 1];
        }
    }

    std::vector<int> layer_sizes_;
    Activation act_ = Activation::Tanh;
    Vec params_;
    std::vector<std::int64_t> w_off_, b_off_;
};

// Glorot-style scaled-uniform weights, zero biases. Same seed, same network.
inline Mlp init_mlp(const std::vector<int>& layer_sizes, Activation act, std::uint64_t seed) {
    Mlp net(layer_sizes, act);
    Rng rng(seed);
    for (int l = 0; l < net.layer_count(); ++l) {
        const int fan_in = net.in_size(l), fan_out = net.out_size(l);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        double* w = net.weights(l);
        for (int i = 0; i < fan_in * fan_out; ++i) w[i] = rng.uniform(-bound, bound);
        // biases stay zero
    }
    return net;
}

// Plain forward evaluation.
inline double forward(const Mlp& net, std::span<const double> x) {
    if (static_cast<int>(x.size()) != net.input_dim())
        throw DimensionError("forward: input size " + std::to_string(x.size()) + " != network input dim " +
                             std::to_string(net.input_dim()));
    Vec a(x.begin(), x.end()), z;
    const int L = net.layer_count();
    for (int l = 0; l < L; ++l) {
        const int in = net.in_size(l), out = net.out_size(l);
        const double* W = net.weights(l);
        const double* b = net.biases(l);
        z.assign(static_cast<std::size_t>(out), 0.0);
        for (int o = 0; o < out; ++o) {
            const double* row = W + static_cast<std::size_t>(o) * in;
            double acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
            int i = 0;
            for (; i + 4 <= in; i += 4) {
                acc0 += row[i] * a[static_cast<std::size_t>(i)];
                acc1 += row[i + 1] * a[static_cast<std::size_t>(i) + 1];
                acc2 += row[i + 2] * a[static_cast<std::size_t>(i) + 2];
                acc3 += row[i + 3] * a[static_cast<std::size_t>(i) + 3];
            }
            for (; i < in; ++i) acc0 += row[i] * a[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(o)] = ((acc0 + acc1) + (acc2 + acc3)) + b[o];
        }
        if (l + 1 < L) {
            a.resize(static_cast<std::size_t>(out));
            for (int o = 0; o < out; ++o) a[static_cast<std::size_t>(o)] = act_derivs(net.activation(), z[static_cast<std::size_t>(o)]).a;
        } else {
            a = z;
        }
    }
    return a[0];
}

// Evaluates the network on many inputs (row-major n x dim), vectorizing
// across a lane block of points. This is the convolution hot path.
inline void forward_batch(const Mlp& net, const double* xs, std::size_t n, double* out) {
    constexpr int P = 8;
    const int dim = net.input_dim();
    const int L = net.layer_count();
    int maxw = dim;
    for (int s : net.layer_sizes()) maxw = std::max(maxw, s);
    Vec cur(static_cast<std::size_t>(maxw) * P), nxt(static_cast<std::size_t>(maxw) * P);

    for (std::size_t base = 0; base < n; base += P) {
        const int lanes = static_cast<int>(std::min<std::size_t>(P, n - base));
        for (int i = 0; i < dim; ++i)
            for (int p = 0; p < P; ++p)
                cur[static_cast<std::size_t>(i) * P + p] =
                    xs[(base + static_cast<std::size_t>(p < lanes ? p : 0)) * dim + i];
        int in = dim;
        for (int l = 0; l < L; ++l) {
            const int out_sz = net.out_size(l);
            const double* W = net.weights(l);
            const double* b = net.biases(l);
            for (int o = 0; o < out_sz; ++o) {
                const double* row = W + static_cast<std::size_t>(o) * in;
                double acc[P];
                for (int p = 0; p < P; ++p) acc[p] = b[o];
                for (int i = 0; i < in; ++i) {
                    const double w = row[i];
                    const double* av = &cur[static_cast<std::size_t>(i) * P];
                    for (int p = 0; p < P; ++p) acc[p] += w * av[p];
                }
                double* zv = &nxt[static_cast<std::size_t>(o) * P];
                for (int p = 0; p < P; ++p) zv[p] = acc[p];
            }
            if (l + 1 < L) {
                for (int o = 0; o < out_sz; ++o) {
                    double* zv = &nxt[static_cast<std::size_t>(o) * P];
                    for (int p = 0; p < P; ++p) zv[p] = act_derivs(net.activation(), zv[p]).a;
                }
            }
            cur.swap(nxt);
            in = out_sz;
        }
        for (int p = 0; p < lanes; ++p) out[base + static_cast<std::size_t>(p)] = cur[static_cast<std::size_t>(p)];
    }
}

// ---------------------------------------------------------------------------
// ModelFile
//
// Layout: magic "DGGF" | 1-byte version | u32 LE metadata length | metadata
// (UTF-8 JSON) | raw little-endian f64 parameters in layer order.
// ---------------------------------------------------------------------------

struct ModelMeta {
    std::vector<int> layer_sizes;
    std::string activation;
    int coord_dim = 0;              // dimension of the underlying domain
    std::string domain_id;          // e.g. "circle;c=0,0;r=1"
    std::string operator_id;        // e.g. "poisson" / "helmholtz;k=1"
    std::string train_digest;       // digest of the training config
};

inline constexpr std::uint8_t kModelVersion = 1;

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& s, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[off + static_cast<std::size_t>(i)]);
    return v;
}

inline double get_f64(const std::string& s, std::size_t off) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(s[off + static_cast<std::size_t>(i)]);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace detail

inline std::string save_model(const Mlp& net, const ModelMeta& meta) {
    nlohmann::json j;
    j["layer_sizes"] = net.layer_sizes();
    j["activation"] = activation_name(net.activation());
    j["coord_dim"] = meta.coord_dim;
    j["domain_id"] = meta.domain_id;
    j["operator_id"] = meta.operator_id;
    j["train_digest"] = meta.train_digest;
    const std::string header = j.dump();

    std::string out = "DGGF";
    out.push_back(static_cast<char>(kModelVersion));
    detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    for (double d : net.params()) detail::put_f64(out, d);
    return out;
}

inline std::pair<Mlp, ModelMeta> load_model(const std::string& bytes) {
    if (bytes.size() < 9) throw TruncatedFileError("model file shorter than fixed header");
    if (bytes.compare(0, 4, "DGGF") != 0) throw BadMagicError("bad magic; not a model file");
    const auto version = static_cast<std::uint8_t>(bytes[4]);
    if (version != kModelVersion)
        throw BadVersionError("unsupported model version " + std::to_string(int(version)));
    const std::uint32_t hlen = detail::get_u32(bytes, 5);
    if (bytes.size() < 9 + static_cast<std::size_t>(hlen)) throw TruncatedFileError("metadata block truncated");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.substr(9, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw BadMagicError(std::string("metadata is not valid JSON: ") + e.what());
    }

    ModelMeta meta;
    meta.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    meta.activation = j.at("activation").get<std::string>();
    meta.coord_dim = j.at("coord_dim").get<int>();
    meta.domain_id = j.at("domain_id").get<std::string>();
    meta.operator_id = j.at("operator_id").get<std::string>();
    meta.train_digest = j.at("train_digest").get<std::string>();

    Mlp net(meta.layer_sizes, activation_from_name(meta.activation));
    const std::size_t need = 9 + hlen + static_cast<std::size_t>(net.total_params()) * 8;
    if (bytes.size() < need) throw TruncatedFileError("parameter payload truncated");
    for (std::int64_t i = 0; i < net.total_params(); ++i)
        net.params()[static_cast<std::size_t>(i)] =
            detail::get_f64(bytes, 9 + hlen + static_cast<std::size_t>(i) * 8);
    return {std::move(net), std::move(meta)};
}

inline void save_model_file(const std::string& path, const Mlp& net, const ModelMeta& meta) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open for writing: " + path);
    const std::string bytes = save_model(net, meta);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::pair<Mlp, ModelMeta> load_model_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open model file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return load_model(bytes);
}

}  // namespace dggf
