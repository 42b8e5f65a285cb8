#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "kspu/errors.hpp"
#include "kspu/rng.hpp"
#include "kspu/tensor.hpp"

// Named parameters, Adam, a finite-difference gradient checker and the
// KSPU checkpoint container.
namespace kspu::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

template <typename T>
struct AdamState {
    std::vector<T> m, v;
};

template <typename T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        auto [it, inserted] = params_.emplace(name, std::move(t));
        if (!inserted) throw InvalidConfig("ParameterStore: duplicate parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw InvalidConfig("ParameterStore: unknown parameter '" + name + "'");
        return it->second;
    }

    // Sorted by name; iteration order is deterministic.
    std::map<std::string, Tensor<T>>& params() { return params_; }
    const std::map<std::string, Tensor<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    size_t total_count() const {
        size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    std::map<std::string, AdamState<T>> adam;
    std::int64_t step = 0;

private:
    std::map<std::string, Tensor<T>> params_;
};

// One Adam update over every parameter, with bias correction. Gradients are
// consumed (zeroed) by the step. Throws MissingGradient if a parameter was
// never reached by backward().
template <typename T>
void adam_step(ParameterStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
    store.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(store.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(store.step));
    for (auto& [name, t] : store.params()) {
        if (t.grad().empty()) throw MissingGradient("adam_step: no gradient for '" + name + "'");
        auto& slot = store.adam[name];
        if (slot.m.empty()) {
            slot.m.assign(t.numel(), T(0));
            slot.v.assign(t.numel(), T(0));
        }
        auto& value = t.mutable_value();
        const auto& g = t.grad();
        for (int i = 0; i < t.numel(); ++i) {
            slot.m[i] = static_cast<T>(beta1 * slot.m[i] + (1.0 - beta1) * g[i]);
            slot.v[i] = static_cast<T>(beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i]);
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
        }
        t.zero_grad();
    }
}

// ---- initialization ----------------------------------------------------------

template <typename T>
Tensor<T> normal_init(std::vector<int> shape, double stddev, Rng& rng) {
    const int n = detail::shape_numel(shape);
    std::vector<T> v(n);
    for (int i = 0; i < n; ++i) v[i] = static_cast<T>(stddev * rng.normal());
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// He-normal fan-in initialization for conv kernels (cout,cin,kh,kw).
template <typename T>
Tensor<T> he_conv_init(int cout, int cin, int kh, int kw, Rng& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * kh * kw));
    return normal_init<T>({cout, cin, kh, kw}, stddev, rng);
}

// ---- gradient checking ---------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    int worst_index = -1;
};

// Central finite differences against reverse-mode gradients, in 64-bit mode.
// f rebuilds the scalar loss from the store's current values on every call
// and must be deterministic. The relative-error denominator is floored so
// finite-difference noise on exactly-zero gradients does not register.
template <typename F>
GradCheckReport grad_check(ParameterStore<double>& store, F&& f, double step = 1e-5) {
    store.zero_grad();
    Tensor<double> loss = f();
    loss.backward();
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, t] : store.params()) {
        if (t.grad().empty())
            throw MissingGradient("grad_check: parameter '" + name + "' not reached by backward");
        analytic[name] = t.grad();
        t.zero_grad();
    }

    GradCheckReport report;
    for (auto& [name, t] : store.params()) {
        auto& value = t.mutable_value();
        for (int i = 0; i < t.numel(); ++i) {
            const double saved = value[i];
            value[i] = saved + step;
            const double up = f().item();
            value[i] = saved - step;
            const double down = f().item();
            value[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double ad = analytic[name][i];
            const double denom = std::max({std::abs(fd), std::abs(ad), 1e-4});
            const double err = std::abs(fd - ad) / denom;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

// ---- checkpoint container -------------------------------------------------------
//
// Layout: ASCII magic "KSPU", version u32 LE, header-length u64 LE, UTF-8
// JSON header listing {name, shape, dtype, byte_offset} per tensor (plus any
// extra metadata), then raw little-endian tensor data in header order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else static_assert(sizeof(T) == 0, "unsupported dtype");
}

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const nlohmann::json& extra,
                     const std::filesystem::path& path) {
    nlohmann::json header = extra;
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : store.params()) {
        tensors.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"dtype", dtype_name<T>()},
                           {"byte_offset", offset}});
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(T);
    }
    header["tensors"] = std::move(tensors);
    const std::string header_bytes = header.dump();

    // Write to a temp file and rename so an interrupted run never leaves a
    // partially written checkpoint at the destination.
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("save_checkpoint: cannot open " + tmp.string());
        out.write("KSPU", 4);
        const std::uint32_t version = kCheckpointVersion;
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        const std::uint64_t hlen = header_bytes.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
        for (const auto& [name, t] : store.params())
            out.write(reinterpret_cast<const char*>(t.value().data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(T)));
        if (!out) throw IoError("save_checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
std::pair<ParameterStore<T>, nlohmann::json> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "KSPU", 4) != 0)
        throw CheckpointMismatch("load_checkpoint: bad magic in " + path.string());
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion)
        throw CheckpointMismatch("load_checkpoint: unsupported version in " + path.string());
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header_bytes(hlen, '\0');
    in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("load_checkpoint: truncated header in " + path.string());
    nlohmann::json header = nlohmann::json::parse(header_bytes, nullptr, false);
    if (header.is_discarded())
        throw IoError("load_checkpoint: invalid JSON header in " + path.string());

    ParameterStore<T> store;
    const std::streampos data_start = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (entry.at("dtype").get<std::string>() != dtype_name<T>())
            throw CheckpointMismatch("load_checkpoint: dtype mismatch for '" + name + "'");
        const std::uint64_t offset = entry.at("byte_offset");
        const int n = detail::shape_numel(shape);
        std::vector<T> data(n);
        in.seekg(data_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(T)));
        if (!in) throw IoError("load_checkpoint: truncated tensor '" + name + "'");
        store.add(name, Tensor<T>::from(shape, std::move(data), true));
    }
    return {std::move(store), std::move(header)};
}

}  // namespace kspu::nn
