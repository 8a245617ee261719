// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rammerge/dtype.hpp"
#include "rammerge/hash.hpp"

namespace rammerge {

using Metadata = std::map<std::string, std::string>;

/// Byte offsets relative to the start of the data region (just after the header).
struct ByteRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t size() const noexcept { return end - begin; }
    bool operator==(const ByteRange&) const = default;
};

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    ByteRange byte_range;

    std::uint64_t numel() const noexcept;
    bool operator==(const TensorMeta&) const = default;
};

/// Product of dimensions; 1 for a scalar (empty shape). Throws FormatError on overflow.
std::uint64_t element_count(std::span<const std::uint64_t> shape);

/// Read-only handle to a safetensors checkpoint. Only the header is parsed on
/// open; tensor data is fetched on demand with positioned reads, so copies of
/// a handle can be used from several threads at once.
class Checkpoint {
public:
    static Checkpoint open(const std::filesystem::path& path);

    const std::filesystem::path& path() const noexcept;
    /// Tensors in header order.
    const std::vector<TensorMeta>& tensors() const noexcept;
    const TensorMeta* find(std::string_view name) const noexcept;
    /// Throws NotFound.
    const TensorMeta& meta(std::string_view name) const;
    const Metadata& metadata() const noexcept;

    std::uint64_t header_length() const noexcept;
    /// Absolute file offset of the data region: 8 + header length.
    std::uint64_t data_offset() const noexcept;
    std::uint64_t file_size() const noexcept;
    /// Total element count across all tensors.
    std::uint64_t parameter_count() const noexcept;

    std::vector<float> read_tensor_f32(std::string_view name) const;

    /// Read `out.size()` elements of `meta` starting at flat element
    /// `first`, widened to f32.
    void read_f32(const TensorMeta& meta, std::uint64_t first, std::span<float> out) const;

    /// Raw stored bytes of a tensor.
    std::vector<std::byte> read_raw(std::string_view name) const;

private:
    struct State;
    explicit Checkpoint(std::shared_ptr<const State> state);

    void pread_exact(std::uint64_t offset, std::span<std::byte> out) const;

    std::shared_ptr<const State> state_;
};

inline Checkpoint open_checkpoint(const std::filesystem::path& path) {
    return Checkpoint::open(path);
}

inline std::vector<float> read_tensor_f32(const Checkpoint& ckpt, std::string_view name) {
    return ckpt.read_tensor_f32(name);
}

/// Name, storage dtype and shape of one output tensor.
struct TensorSpec {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
};

/// Streaming safetensors writer. The full layout is fixed up front so the
/// header can be emitted first; tensor data is then appended strictly in
/// layout order, in as many chunks as convenient. Output goes to a sibling
/// temporary file that is renamed into place by finish().
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path out, std::vector<TensorSpec> layout,
                     Metadata metadata = {});
    ~CheckpointWriter();

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    /// Append the next `values.size()` elements. A chunk may not straddle two
    /// tensors. Values are narrowed to the tensor's dtype (round to nearest even).
    void append(std::span<const float> values);

    /// The tensor the next append() feeds, or nullptr when all data is written.
    const TensorSpec* current() const noexcept;
    std::uint64_t remaining_in_current() const noexcept;

    /// Flush, validate completeness (ShapeMismatch otherwise), rename into place.
    Checkpoint finish();

    /// FNV-1a 64 of every byte written so far; the whole file after finish().
    std::uint64_t checksum() const noexcept { return hash_.value(); }
    std::uint64_t bytes_written() const noexcept { return bytes_written_; }

private:
    void write_bytes(std::span<const std::byte> bytes);
    void advance_past_empty();

    std::filesystem::path out_;
    std::filesystem::path tmp_;
    std::vector<TensorSpec> layout_;
    std::vector<std::uint64_t> numels_;
    std::ofstream stream_;
    std::vector<std::byte> scratch_;
    Fnv1a64 hash_;
    std::uint64_t bytes_written_ = 0;
    std::size_t tensor_index_ = 0;
    std::uint64_t written_in_tensor_ = 0;
    bool finished_ = false;
};

/// In-memory tensor for the one-shot writer. `meta.byte_range` is ignored.
struct TensorEntry {
    TensorMeta meta;
    std::vector<float> values;
};

/// Write a whole checkpoint in one call. A tensor is stored in
/// `target_dtypes[name]` when present, else in `meta.dtype`.
Checkpoint write_checkpoint(const std::filesystem::path& out, std::span<const TensorEntry> tensors,
                            const std::map<std::string, DType>& target_dtypes = {},
                            const Metadata& metadata = {});

struct AlignmentReport {
    struct Row {
        std::string tensor;
        std::vector<std::uint64_t> shape;
        /// dtypes[0] is the base, dtypes[1 + t] is model t.
        std::vector<DType> dtypes;
    };
    std::vector<Row> rows;
};

/// Every model must carry exactly the base's tensor names with identical
/// shapes; dtypes may differ. Throws AlignmentError for the first offender.
AlignmentReport validate_alignment(const Checkpoint& base, std::span<const Checkpoint> models);

}  // namespace rammerge
