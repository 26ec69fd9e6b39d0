#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "otrank/binary_io.hpp"
#include "otrank/embeddings.hpp"
#include "otrank/error.hpp"
#include "otrank/reranker.hpp"
#include "otrank/sinkhorn.hpp"

namespace otrank {

struct TrainConfig {
    double learning_rate = 1e-5;
    std::uint32_t batch_size = 64;  // candidate windows
    double gamma = 0.3;
    std::uint32_t epochs = 10;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    SinkhornConfig sinkhorn;
    std::uint32_t hidden = 400;
    std::uint32_t gcn_layers = 2;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
        if (!(gamma >= 0.0)) throw ValidationError("gamma must be >= 0");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (hidden < 1) throw ValidationError("hidden must be >= 1");
        if (gcn_layers < 1) throw ValidationError("gcn_layers must be >= 1");
        if (!(sinkhorn.eps_scale > 0.0)) throw ValidationError("sinkhorn eps_scale must be > 0");
        if (sinkhorn.max_iter < 1) throw ValidationError("sinkhorn max_iter must be >= 1");
        if (!(sinkhorn.tol > 0.0)) throw ValidationError("sinkhorn tol must be > 0");
    }

    bool operator==(const TrainConfig& o) const {
        return learning_rate == o.learning_rate && batch_size == o.batch_size && gamma == o.gamma &&
               epochs == o.epochs && seed == o.seed && adam_beta1 == o.adam_beta1 && adam_beta2 == o.adam_beta2 &&
               adam_eps == o.adam_eps && sinkhorn.eps_scale == o.sinkhorn.eps_scale &&
               sinkhorn.max_iter == o.sinkhorn.max_iter && sinkhorn.tol == o.sinkhorn.tol && hidden == o.hidden &&
               gcn_layers == o.gcn_layers;
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"gamma", c.gamma},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"sinkhorn_eps_scale", c.sinkhorn.eps_scale},
            {"sinkhorn_max_iter", c.sinkhorn.max_iter},
            {"sinkhorn_tol", c.sinkhorn.tol},
            {"hidden", c.hidden},
            {"gcn_layers", c.gcn_layers}};
}

/// Overlays any keys present in `j` onto `c`.
inline void merge_json(TrainConfig& c, const nlohmann::json& j) {
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.gamma = j.value("gamma", c.gamma);
        c.epochs = j.value("epochs", c.epochs);
        c.seed = j.value("seed", c.seed);
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.sinkhorn.eps_scale = j.value("sinkhorn_eps_scale", c.sinkhorn.eps_scale);
        c.sinkhorn.max_iter = j.value("sinkhorn_max_iter", c.sinkhorn.max_iter);
        c.sinkhorn.tol = j.value("sinkhorn_tol", c.sinkhorn.tol);
        c.hidden = j.value("hidden", c.hidden);
        c.gcn_layers = j.value("gcn_layers", c.gcn_layers);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid configuration value: ") + e.what());
    }
}

struct AdamState {
    ModelParams m;
    ModelParams v;
    std::uint64_t step = 0;
};

struct Checkpoint {
    ModelParams params;
    TrainConfig config;
    std::uint32_t epoch = 0;
    AdamState adam;
    std::string rng_state;
    /// Marginals at inference must use the table the model was trained with.
    FrequencyTable frequencies;
};

namespace detail {

inline void write_tensors(io::ByteWriter& w, const ModelParams& p) {
    for_each_tensor(p, [&](const std::string&, std::span<const double> t) {
        for (double v : t) w.f64(v);
    });
}

inline void read_tensors(io::ByteReader& r, ModelParams& p) {
    for_each_tensor(p, [&](const std::string&, std::span<double> t) {
        for (double& v : t) v = r.f64();
    });
}

} // namespace detail

/// Layout (little-endian): "OTCK", u32 version, u32 dim, u32 gcn layers, u32 hidden width
/// of the dependency/head/discriminator nets, model tensors as f64 in for_each_tensor
/// order, then training state (epoch, Adam step and moments, config, RNG state,
/// frequency table), then CRC32 of all preceding bytes.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
    constexpr std::uint32_t kVersion = 1;
    io::ByteWriter w;
    w.raw("OTCK");
    w.u32(kVersion);
    const auto shape = ck.params.shape();
    w.u32(static_cast<std::uint32_t>(shape.dim));
    w.u32(static_cast<std::uint32_t>(shape.gcn_layers));
    w.u32(static_cast<std::uint32_t>(ck.params.dependency.layers.front().weight.rows()));
    w.u32(static_cast<std::uint32_t>(ck.params.head.layers.front().weight.rows()));
    w.u32(static_cast<std::uint32_t>(ck.params.discriminator.layers.front().weight.rows()));
    detail::write_tensors(w, ck.params);

    w.u32(ck.epoch);
    w.u64(ck.adam.step);
    detail::write_tensors(w, ck.adam.m);
    detail::write_tensors(w, ck.adam.v);

    const auto& c = ck.config;
    w.f64(c.learning_rate);
    w.u32(c.batch_size);
    w.f64(c.gamma);
    w.u32(c.epochs);
    w.u64(c.seed);
    w.f64(c.adam_beta1);
    w.f64(c.adam_beta2);
    w.f64(c.adam_eps);
    w.f64(c.sinkhorn.eps_scale);
    w.u32(static_cast<std::uint32_t>(c.sinkhorn.max_iter));
    w.f64(c.sinkhorn.tol);
    w.u32(c.hidden);
    w.u32(c.gcn_layers);
    w.str(ck.rng_state);

    w.u64(ck.frequencies.num_questions);
    w.u64(ck.frequencies.counts.size());
    for (const auto& [word, count] : ck.frequencies.counts) {
        w.str(word);
        w.u32(count);
    }
    w.u32(io::crc32(w.bytes()));
    return w.take();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    if (bytes.size() < 8) {
        throw FormatError(what + ": file too short");
    }
    const auto body = bytes.substr(0, bytes.size() - 4);
    io::ByteReader tail(bytes.substr(bytes.size() - 4), what);
    if (tail.u32() != io::crc32(body)) {
        throw FormatError(what + ": CRC32 mismatch");
    }
    io::ByteReader r(body, what);
    if (r.raw(4) != "OTCK") {
        throw FormatError(what + ": bad magic (expected OTCK)");
    }
    if (const auto version = r.u32(); version != 1) {
        throw FormatError(what + ": unsupported version " + std::to_string(version));
    }
    ModelShape shape;
    shape.dim = r.u32();
    shape.gcn_layers = static_cast<int>(r.u32());
    shape.hidden = r.u32();
    const auto head_hidden = r.u32();
    const auto disc_hidden = r.u32();
    if (head_hidden != shape.hidden || disc_hidden != shape.hidden) {
        throw FormatError(what + ": differing hidden widths are not supported");
    }
    if (shape.dim < 1 || shape.hidden < 1 || shape.gcn_layers < 1) {
        throw FormatError(what + ": invalid model shape");
    }
    Checkpoint ck;
    ck.params = zero_params(shape);
    detail::read_tensors(r, ck.params);
    ck.epoch = r.u32();
    ck.adam.step = r.u64();
    ck.adam.m = zero_params(shape);
    ck.adam.v = zero_params(shape);
    detail::read_tensors(r, ck.adam.m);
    detail::read_tensors(r, ck.adam.v);

    auto& c = ck.config;
    c.learning_rate = r.f64();
    c.batch_size = r.u32();
    c.gamma = r.f64();
    c.epochs = r.u32();
    c.seed = r.u64();
    c.adam_beta1 = r.f64();
    c.adam_beta2 = r.f64();
    c.adam_eps = r.f64();
    c.sinkhorn.eps_scale = r.f64();
    c.sinkhorn.max_iter = static_cast<int>(r.u32());
    c.sinkhorn.tol = r.f64();
    c.hidden = r.u32();
    c.gcn_layers = r.u32();
    ck.rng_state = r.str();

    ck.frequencies.num_questions = r.u64();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto word = r.str();
        ck.frequencies.counts[word] = r.u32();
    }
    if (!r.done()) {
        throw FormatError(what + ": trailing bytes before CRC");
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    io::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(io::read_file(path), path);
}

} // namespace otrank
