// SPDX-License-Identifier: Apache-2.0

#include "reference.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include <unistd.h>

#include "rammerge/hash.hpp"
#include "rammerge/philox.hpp"
#include "rammerge/tensor_store.hpp"

namespace rammerge::testing {

namespace fs = std::filesystem;

namespace {

// Value of a non-negative 16-bit encoding, from the format definition.
double decode_half(std::uint16_t bits) {
    const int e = (bits >> 10) & 0x1f;
    const int m = bits & 0x3ff;
    if (e == 0) return std::ldexp(static_cast<double>(m), -24);
    return std::ldexp(static_cast<double>(1024 + m), e - 25);
}

double decode_brain(std::uint16_t bits) {
    const int e = (bits >> 7) & 0xff;
    const int m = bits & 0x7f;
    if (e == 0) return std::ldexp(static_cast<double>(m), -133);
    return std::ldexp(static_cast<double>(128 + m), e - 134);
}

struct Table {
    std::vector<double> values;  // ascending, finite, non-negative
    std::vector<std::uint16_t> bits;
    double overflow_at = 0.0;    // |x| >= this rounds to infinity
    std::uint16_t inf_bits = 0;
};

Table build_table(DType dtype) {
    Table t;
    const std::uint16_t inf = dtype == DType::F16 ? 0x7c00 : 0x7f80;
    for (std::uint32_t b = 0; b < inf; ++b) {
        const auto bits = static_cast<std::uint16_t>(b);
        t.values.push_back(dtype == DType::F16 ? decode_half(bits) : decode_brain(bits));
        t.bits.push_back(bits);
    }
    const double max = t.values.back();
    const double below = t.values[t.values.size() - 2];
    t.overflow_at = max + (max - below) / 2.0;
    t.inf_bits = inf;
    return t;
}

const Table& table(DType dtype) {
    static const Table half = build_table(DType::F16);
    static const Table brain = build_table(DType::BF16);
    return dtype == DType::F16 ? half : brain;
}

float widen(std::uint16_t bits, DType dtype) {
    const bool negative = (bits & 0x8000) != 0;
    const std::uint16_t mag = bits & 0x7fff;
    double v;
    if (mag == table(dtype).inf_bits) {
        v = INFINITY;
    } else {
        v = dtype == DType::F16 ? decode_half(mag) : decode_brain(mag);
    }
    return static_cast<float>(negative ? -v : v);
}

}  // namespace

float ref_narrow(float x, DType dtype) {
    if (dtype == DType::F32) return x;
    if (std::isnan(x)) return x;
    const Table& t = table(dtype);
    const bool negative = std::signbit(x);
    const double a = std::fabs(static_cast<double>(x));
    std::uint16_t chosen;
    if (a >= t.overflow_at) {
        chosen = t.inf_bits;
    } else {
        const auto it = std::lower_bound(t.values.begin(), t.values.end(), a);
        const std::size_t hi = static_cast<std::size_t>(it - t.values.begin());
        if (hi < t.values.size() && t.values[hi] == a) {
            chosen = t.bits[hi];
        } else if (hi == t.values.size()) {
            chosen = t.bits.back();
        } else {
            const std::size_t lo = hi - 1;
            const double dlo = a - t.values[lo];
            const double dhi = t.values[hi] - a;
            if (dlo < dhi) chosen = t.bits[lo];
            else if (dhi < dlo) chosen = t.bits[hi];
            else chosen = (t.bits[lo] & 1) == 0 ? t.bits[lo] : t.bits[hi];
        }
    }
    return widen(static_cast<std::uint16_t>(chosen | (negative ? 0x8000 : 0)), dtype);
}

std::uint32_t bits_of(float x) {
    std::uint32_t b;
    std::memcpy(&b, &x, sizeof b);
    return b;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b, std::string* where) {
    if (a.size() != b.size()) {
        if (where) *where = "length " + std::to_string(a.size()) + " vs " + std::to_string(b.size());
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (bits_of(a[i]) != bits_of(b[i])) {
            if (where) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "element %zu: %.9g (0x%08x) vs %.9g (0x%08x)", i,
                              static_cast<double>(a[i]), bits_of(a[i]), static_cast<double>(b[i]), bits_of(b[i]));
                *where = buf;
            }
            return false;
        }
    }
    return true;
}

void write_ref(const fs::path& path, const RefCheckpoint& ckpt) {
    std::vector<TensorEntry> entries;
    for (const auto& t : ckpt) {
        TensorEntry e;
        e.meta.name = t.name;
        e.meta.dtype = t.dtype;
        e.meta.shape = t.shape;
        e.values = t.values;
        entries.push_back(std::move(e));
    }
    write_checkpoint(path, entries);
}

RefCheckpoint read_ref(const fs::path& path) {
    const Checkpoint c = Checkpoint::open(path);
    RefCheckpoint out;
    for (const auto& meta : c.tensors()) out.push_back({meta.name, meta.dtype, meta.shape, c.read_tensor_f32(meta.name)});
    return out;
}

// ---------------------------------------------------------------------------

namespace {

const RefTensor& by_name(const RefCheckpoint& ckpt, const std::string& name) {
    for (const auto& t : ckpt) {
        if (t.name == name) return t;
    }
    throw std::runtime_error("reference: missing tensor " + name);
}

using Taus = std::vector<std::vector<std::vector<float>>>;  // [model][tensor][element]

Taus task_vectors(const RefCheckpoint& base, const std::vector<RefCheckpoint>& models) {
    Taus taus(models.size());
    for (std::size_t t = 0; t < models.size(); ++t) {
        for (const auto& b : base) {
            const auto& m = by_name(models[t], b.name);
            std::vector<float> tau(b.values.size());
            for (std::size_t i = 0; i < tau.size(); ++i) tau[i] = m.values[i] - b.values[i];
            taus[t].push_back(std::move(tau));
        }
    }
    return taus;
}

std::vector<RefModelStats> probe(const Taus& taus, float epsilon, std::uint64_t* total) {
    const std::size_t n = taus.size();
    std::vector<RefModelStats> stats(n);
    for (auto& s : stats) s.histogram.assign(n, 0);
    *total = 0;
    if (n == 0) return stats;
    for (std::size_t k = 0; k < taus[0].size(); ++k) {
        for (std::size_t i = 0; i < taus[0][k].size(); ++i) {
            ++*total;
            std::size_t c = 0;
            for (std::size_t t = 0; t < n; ++t) c += std::fabs(taus[t][k][i]) > epsilon;
            for (std::size_t t = 0; t < n; ++t) {
                if (!(std::fabs(taus[t][k][i]) > epsilon)) continue;
                auto& s = stats[t];
                ++s.nonzero;
                if (c == 1) ++s.unique;
                else ++s.shared;
                ++s.histogram[c - 1];
            }
        }
    }
    for (auto& s : stats) {
        if (s.nonzero == 0) s.rho.reset();
        else if (s.unique == 0) s.rho = INFINITY;
        else s.rho = static_cast<double>(s.shared) / static_cast<double>(s.unique);
    }
    return stats;
}

double ref_lambda(const RefModelStats& s, const RefConfig& config) {
    if (config.method == "ram") return 1.0;
    if (!s.rho) return 1.0;
    const double rho = *s.rho;
    if (config.rescale == "none") return 1.0;
    if (config.rescale == "soft") {
        if (std::isinf(rho)) return 1.0 + config.r;
        return 1.0 + config.r * (rho / (1.0 + rho));
    }
    return 1.0 + config.r * std::min(std::max(rho, 0.0), config.alpha);
}

float apply(float base, float delta) {
    return delta == 0.0f ? base : base + delta;
}

}  // namespace

std::vector<float> reference_trim(const std::vector<float>& tau, double ratio) {
    const std::size_t len = tau.size();
    const auto keep = std::min<std::size_t>(len, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(len))));
    std::vector<std::size_t> order(len);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(tau[a]) > std::fabs(tau[b]); });
    std::vector<float> out(len, 0.0f);
    for (std::size_t j = 0; j < keep; ++j) out[order[j]] = tau[order[j]];
    return out;
}

RefResult reference_merge(const RefCheckpoint& base, const std::vector<RefCheckpoint>& models,
                          const std::vector<RefCheckpoint>& fisher, const RefConfig& config) {
    const std::size_t n = models.size();
    const std::size_t tensors = base.size();
    Taus taus = task_vectors(base, models);

    RefResult result;
    result.models = probe(taus, config.epsilon, &result.total);
    const bool ram = config.method == "ram" || config.method == "ram+";
    for (auto& s : result.models) s.lambda = ram ? ref_lambda(s, config) : 1.0;

    // DARE on the raw task vectors.
    const bool dare = config.method == "dare-ta" || config.method == "dare-ties";
    result.dropped.assign(n, 0);
    if (dare) {
        const double keep_scale = 1.0 / (1.0 - config.p);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < tensors; ++k) {
                const std::uint64_t h = fnv1a64(base[k].name);
                auto& tau = taus[t][k];
                for (std::size_t i = 0; i < tau.size(); ++i) {
                    if (keyed_uniform(config.seed, static_cast<std::uint32_t>(t), h, i) < config.p) {
                        tau[i] = 0.0f;
                        ++result.dropped[t];
                    } else {
                        tau[i] = static_cast<float>(static_cast<double>(tau[i]) * keep_scale);
                    }
                }
            }
        }
    }

    const bool ties = config.method == "ties" || config.method == "dare-ties";
    if (ties) {
        for (std::size_t t = 0; t < n; ++t) {
            if (config.global_trim) {
                std::vector<float> all;
                for (const auto& tau : taus[t]) all.insert(all.end(), tau.begin(), tau.end());
                const auto trimmed = reference_trim(all, config.trim);
                std::size_t at = 0;
                for (auto& tau : taus[t]) {
                    std::copy_n(trimmed.begin() + static_cast<std::ptrdiff_t>(at), tau.size(), tau.begin());
                    at += tau.size();
                }
            } else {
                for (auto& tau : taus[t]) tau = reference_trim(tau, config.trim);
            }
        }
    }

    for (std::size_t k = 0; k < tensors; ++k) {
        const RefTensor& b = base[k];
        RefTensor out{b.name, b.dtype, b.shape, std::vector<float>(b.values.size())};
        for (std::size_t i = 0; i < b.values.size(); ++i) {
            float delta = 0.0f;
            if (ram) {
                std::vector<std::size_t> active;
                for (std::size_t t = 0; t < n; ++t) {
                    if (std::fabs(taus[t][k][i]) > config.epsilon) active.push_back(t);
                }
                if (active.size() == 1) {
                    delta = static_cast<float>(result.models[active[0]].lambda *
                                               static_cast<double>(taus[active[0]][k][i]));
                } else if (active.size() > 1) {
                    double sum = 0.0;
                    for (std::size_t t : active) sum += static_cast<double>(taus[t][k][i]);
                    delta = static_cast<float>(sum / static_cast<double>(active.size()));
                }
            } else if (config.method == "ta" || config.method == "dare-ta") {
                double sum = 0.0;
                for (std::size_t t = 0; t < n; ++t) sum += static_cast<double>(taus[t][k][i]);
                delta = static_cast<float>(config.scale * sum);
            } else if (config.method == "fisher") {
                double num = 0.0;
                double den = 0.0;
                for (std::size_t t = 0; t < n; ++t) {
                    const double w =
                        fisher.empty() ? 1.0 : static_cast<double>(by_name(fisher[t], b.name).values[i]);
                    num += w * static_cast<double>(taus[t][k][i]);
                    den += w;
                }
                delta = den > 0.0 ? static_cast<float>(num / den) : 0.0f;
            } else if (ties) {
                double pos = 0.0;
                double neg = 0.0;
                for (std::size_t t = 0; t < n; ++t) {
                    const double v = taus[t][k][i];
                    if (v > 0) pos += v;
                    if (v < 0) neg += -v;
                }
                if (pos > 0 || neg > 0) {
                    if (pos > 0 && neg > 0) ++result.sign_conflicts;
                    const int sign = pos >= neg ? 1 : -1;
                    double sum = 0.0;
                    int count = 0;
                    for (std::size_t t = 0; t < n; ++t) {
                        const double v = taus[t][k][i];
                        if ((sign > 0 && v > 0) || (sign < 0 && v < 0)) {
                            sum += v;
                            ++count;
                        }
                    }
                    delta = static_cast<float>(config.scale * (sum / count));
                }
            } else {
                throw std::runtime_error("reference: unknown method " + config.method);
            }
            out.values[i] = ref_narrow(apply(b.values[i], delta), b.dtype);
        }
        result.output.push_back(std::move(out));
    }
    return result;
}

RefCheckpoint reference_dilution(const RefCheckpoint& base, const std::vector<RefCheckpoint>& models,
                                 std::size_t target, double scale, bool unique_only, float epsilon) {
    const Taus taus = task_vectors(base, models);
    RefCheckpoint out;
    for (std::size_t k = 0; k < base.size(); ++k) {
        const RefTensor& b = base[k];
        RefTensor o{b.name, b.dtype, b.shape, b.values};
        for (std::size_t i = 0; i < b.values.size(); ++i) {
            const float tau = taus[target][k][i];
            if (!(std::fabs(tau) > epsilon)) continue;
            if (unique_only) {
                bool other = false;
                for (std::size_t t = 0; t < models.size(); ++t) {
                    if (t != target && std::fabs(taus[t][k][i]) > epsilon) other = true;
                }
                if (other) continue;
            }
            const auto d = static_cast<float>(scale * static_cast<double>(tau));
            o.values[i] = ref_narrow(apply(b.values[i], d), b.dtype);
        }
        out.push_back(std::move(o));
    }
    return out;
}

// ---------------------------------------------------------------------------

FixtureSet random_fixture(std::mt19937_64& rng, const FixtureShape& shape) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<float> weight(0.0f, 0.05f);
    std::normal_distribution<float> update(0.0f, 0.01f);
    const std::array<DType, 3> dtypes{DType::F32, DType::F16, DType::BF16};
    auto pick_dtype = [&] { return shape.mixed_dtypes ? dtypes[rng() % 3] : DType::F32; };

    FixtureSet set;
    set.models.resize(shape.models);
    if (shape.with_fisher) set.fisher.resize(shape.models);

    const std::size_t count =
        shape.min_tensors + static_cast<std::size_t>(rng() % (shape.max_tensors - shape.min_tensors + 1));
    std::vector<double> densities(shape.models);
    for (auto& d : densities) d = 0.02 + 0.5 * unit(rng);

    for (std::size_t k = 0; k < count; ++k) {
        RefTensor b;
        b.name = "layer." + std::to_string(k) + (k % 2 ? ".weight" : ".bias");
        b.dtype = pick_dtype();
        const double roll = unit(rng);
        if (roll < 0.04) {
            b.shape = {0};
        } else if (roll < 0.08) {
            b.shape = {};
        } else if (roll < 0.5) {
            b.shape = {1 + rng() % shape.max_elements};
        } else {
            const std::uint64_t rows = 1 + rng() % 100;
            b.shape = {rows, 1 + rng() % std::max<std::uint64_t>(1, shape.max_elements / rows)};
        }
        std::uint64_t numel = 1;
        for (auto s : b.shape) numel *= s;
        b.values.resize(numel);
        for (auto& v : b.values) {
            const double r = unit(rng);
            v = r < 0.01 ? -0.0f : r < 0.02 ? 0.0f : ref_narrow(weight(rng), b.dtype);
        }
        // Coarse tensors take deltas from a tiny set: many exact magnitude ties.
        const bool coarse = unit(rng) < 0.3;
        // A hot region most models touch, so supports overlap.
        std::vector<char> hot(numel);
        for (auto& h : hot) h = unit(rng) < 0.2;

        for (std::size_t t = 0; t < shape.models; ++t) {
            RefTensor m{b.name, unit(rng) < 0.2 ? pick_dtype() : b.dtype, b.shape, b.values};
            for (std::size_t i = 0; i < numel; ++i) {
                const double p = hot[i] ? std::min(1.0, densities[t] * 2.5) : densities[t] * 0.5;
                float d = 0.0f;
                if (unit(rng) < p) {
                    const double q = unit(rng);
                    if (coarse) d = static_cast<float>((1 + rng() % 3) * 0.01) * (rng() % 2 ? 1.0f : -1.0f);
                    else if (q < 0.03) d = 1e-5f;
                    else if (q < 0.06) d = -1.2e-5f;
                    else d = update(rng);
                }
                m.values[i] = ref_narrow(b.values[i] + d, m.dtype);
            }
            set.models[t].push_back(std::move(m));
            if (shape.with_fisher) {
                RefTensor f{b.name, pick_dtype(), b.shape, std::vector<float>(numel)};
                for (auto& w : f.values) {
                    w = unit(rng) < 0.15 ? 0.0f : ref_narrow(static_cast<float>(unit(rng) * 3.0), f.dtype);
                }
                set.fisher[t].push_back(std::move(f));
            }
        }
        set.base.push_back(std::move(b));
    }
    return set;
}

FixturePaths write_fixture(const fs::path& dir, const FixtureSet& set) {
    FixturePaths paths;
    paths.base = dir / "base.safetensors";
    write_ref(paths.base, set.base);
    for (std::size_t t = 0; t < set.models.size(); ++t) {
        paths.models.push_back(dir / ("m" + std::to_string(t) + ".safetensors"));
        write_ref(paths.models.back(), set.models[t]);
    }
    for (std::size_t t = 0; t < set.fisher.size(); ++t) {
        paths.fisher.push_back(dir / ("f" + std::to_string(t) + ".safetensors"));
        write_ref(paths.fisher.back(), set.fisher[t]);
    }
    return paths;
}

TempDir::TempDir(const std::string& tag) {
    std::string pattern = (fs::temp_directory_path() / ("rammerge-" + tag + "-XXXXXX")).string();
    if (::mkdtemp(pattern.data()) == nullptr) throw std::runtime_error("mkdtemp failed for " + pattern);
    path_ = pattern;
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

std::vector<char> file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace rammerge::testing
