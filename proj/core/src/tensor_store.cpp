// SPDX-License-Identifier: Apache-2.0

#include "rammerge/tensor_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cstring>
#include <limits>
#include <set>
#include <system_error>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <fmt/core.h>
#include <json.hpp>

#include "rammerge/error.hpp"

namespace rammerge {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// Same ceiling the reference safetensors implementation applies.
constexpr std::uint64_t kMaxHeaderLength = 100ull * 1024 * 1024;
constexpr std::string_view kMetadataKey = "__metadata__";

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, std::string_view what) {
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
        throw FormatError(fmt::format("{}: size overflows 64 bits", what));
    }
    return a * b;
}

class FileDescriptor {
public:
    explicit FileDescriptor(int fd) : fd_(fd) {}
    ~FileDescriptor() {
        if (fd_ >= 0) ::close(fd_);
    }
    FileDescriptor(const FileDescriptor&) = delete;
    FileDescriptor& operator=(const FileDescriptor&) = delete;
    int get() const noexcept { return fd_; }

private:
    int fd_;
};

std::uint64_t json_unsigned(const ordered_json& value, std::string_view what) {
    if (!value.is_number_unsigned()) {
        throw FormatError(fmt::format("{} must be a non-negative integer", what));
    }
    return value.get<std::uint64_t>();
}

}  // namespace

const char* to_string(AlignmentError::Reason reason) noexcept {
    switch (reason) {
        case AlignmentError::Reason::Missing: return "missing";
        case AlignmentError::Reason::Extra: return "extra";
        case AlignmentError::Reason::ShapeMismatch: return "shape-mismatch";
    }
    return "?";
}

std::string to_hex(std::uint64_t value) {
    return fmt::format("{:016x}", value);
}

std::uint64_t element_count(std::span<const std::uint64_t> shape) {
    std::uint64_t n = 1;
    for (std::uint64_t dim : shape) n = checked_mul(n, dim, "tensor shape");
    return n;
}

std::uint64_t TensorMeta::numel() const noexcept {
    std::uint64_t n = 1;
    for (std::uint64_t dim : shape) n *= dim;
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoint

struct Checkpoint::State {
    fs::path path;
    std::unique_ptr<FileDescriptor> fd;
    std::uint64_t file_size = 0;
    std::uint64_t header_length = 0;
    std::vector<TensorMeta> tensors;
    std::unordered_map<std::string, std::size_t> index;
    Metadata metadata;
    std::uint64_t parameter_count = 0;
};

Checkpoint::Checkpoint(std::shared_ptr<const State> state) : state_(std::move(state)) {}

namespace {

ordered_json parse_header_json(const std::string& text) {
    // Reject duplicate keys and floating-point numbers while parsing; the
    // DOM would otherwise silently keep one of the duplicates.
    std::vector<std::set<std::string>> seen;
    auto callback = [&seen](int, nlohmann::json::parse_event_t event, ordered_json& parsed) {
        using Event = nlohmann::json::parse_event_t;
        switch (event) {
            case Event::object_start:
                seen.emplace_back();
                break;
            case Event::object_end:
                seen.pop_back();
                break;
            case Event::key: {
                const auto& key = parsed.get_ref<const std::string&>();
                if (!seen.back().insert(key).second) {
                    throw FormatError(fmt::format("duplicate key '{}' in header", key));
                }
                break;
            }
            case Event::value:
                if (parsed.is_number_float()) {
                    throw FormatError("header contains a floating-point number");
                }
                break;
            default:
                break;
        }
        return true;
    };
    try {
        return ordered_json::parse(text, callback);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("malformed header JSON: {}", e.what()));
    }
}

}  // namespace

Checkpoint Checkpoint::open(const fs::path& path) {
    const int raw_fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (raw_fd < 0) {
        throw IoError(fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    }
    auto state = std::make_shared<State>();
    state->path = path;
    state->fd = std::make_unique<FileDescriptor>(raw_fd);

    struct stat st {};
    if (::fstat(raw_fd, &st) != 0) {
        throw IoError(fmt::format("cannot stat '{}': {}", path.string(), std::strerror(errno)));
    }
    if (!S_ISREG(st.st_mode)) {
        throw IoError(fmt::format("'{}' is not a regular file", path.string()));
    }
    state->file_size = static_cast<std::uint64_t>(st.st_size);

    Checkpoint ckpt(state);
    const std::string where = path.string();

    if (state->file_size < 8) {
        throw FormatError(fmt::format("'{}': file shorter than the 8-byte header length", where));
    }
    std::array<std::byte, 8> prefix{};
    ckpt.pread_exact(0, prefix);
    std::uint64_t header_length = 0;
    for (int i = 7; i >= 0; --i) {
        header_length = (header_length << 8) | std::to_integer<std::uint64_t>(prefix[i]);
    }
    if (header_length == 0) {
        throw FormatError(fmt::format("'{}': header length is zero", where));
    }
    if (header_length > kMaxHeaderLength || header_length > state->file_size - 8) {
        throw FormatError(fmt::format("'{}': header length {} exceeds file size {}", where,
                                      header_length, state->file_size));
    }
    state->header_length = header_length;

    std::string text(header_length, '\0');
    ckpt.pread_exact(8, std::as_writable_bytes(std::span(text.data(), text.size())));
    const ordered_json header = parse_header_json(text);
    if (!header.is_object()) {
        throw FormatError(fmt::format("'{}': header is not a JSON object", where));
    }

    const std::uint64_t data_size = state->file_size - 8 - header_length;
    for (const auto& [name, entry] : header.items()) {
        if (name == kMetadataKey) {
            if (!entry.is_object()) {
                throw FormatError(fmt::format("'{}': __metadata__ must be an object", where));
            }
            for (const auto& [key, value] : entry.items()) {
                if (!value.is_string()) {
                    throw FormatError(
                        fmt::format("'{}': __metadata__ value for '{}' is not a string", where, key));
                }
                state->metadata.emplace(key, value.get<std::string>());
            }
            continue;
        }

        const std::string ctx = fmt::format("'{}': tensor '{}'", where, name);
        if (!entry.is_object()) throw FormatError(ctx + " entry is not an object");
        for (const auto& [key, _] : entry.items()) {
            if (key != "dtype" && key != "shape" && key != "data_offsets") {
                throw FormatError(fmt::format("{} has unknown field '{}'", ctx, key));
            }
        }
        if (!entry.contains("dtype") || !entry["dtype"].is_string()) {
            throw FormatError(ctx + " has no dtype string");
        }
        const auto dtype = parse_dtype(entry["dtype"].get<std::string>());
        if (!dtype) {
            throw FormatError(fmt::format("{} has unsupported dtype '{}'", ctx,
                                          entry["dtype"].get<std::string>()));
        }
        if (!entry.contains("shape") || !entry["shape"].is_array()) {
            throw FormatError(ctx + " has no shape array");
        }
        if (!entry.contains("data_offsets") || !entry["data_offsets"].is_array() ||
            entry["data_offsets"].size() != 2) {
            throw FormatError(ctx + " needs data_offsets [begin, end]");
        }

        TensorMeta meta;
        meta.name = name;
        meta.dtype = *dtype;
        for (const auto& dim : entry["shape"]) meta.shape.push_back(json_unsigned(dim, ctx + " shape"));
        meta.byte_range.begin = json_unsigned(entry["data_offsets"][0], ctx + " data_offsets");
        meta.byte_range.end = json_unsigned(entry["data_offsets"][1], ctx + " data_offsets");

        if (meta.byte_range.end < meta.byte_range.begin) {
            throw FormatError(ctx + " data_offsets end precedes begin");
        }
        const std::uint64_t expected = checked_mul(element_count(meta.shape), width(meta.dtype), ctx);
        if (meta.byte_range.size() != expected) {
            throw FormatError(fmt::format("{} spans {} bytes but shape and dtype need {}", ctx,
                                          meta.byte_range.size(), expected));
        }
        if (meta.byte_range.end > data_size) {
            throw FormatError(fmt::format("{} ends at {} beyond the {}-byte data region", ctx,
                                          meta.byte_range.end, data_size));
        }
        state->parameter_count += element_count(meta.shape);
        state->index.emplace(name, state->tensors.size());
        state->tensors.push_back(std::move(meta));
    }

    std::vector<const TensorMeta*> by_offset;
    for (const auto& meta : state->tensors) {
        if (meta.byte_range.size() > 0) by_offset.push_back(&meta);
    }
    std::sort(by_offset.begin(), by_offset.end(), [](const TensorMeta* a, const TensorMeta* b) {
        return a->byte_range.begin < b->byte_range.begin;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->byte_range.begin < by_offset[i - 1]->byte_range.end) {
            throw FormatError(fmt::format("'{}': byte ranges of '{}' and '{}' overlap", where,
                                          by_offset[i - 1]->name, by_offset[i]->name));
        }
    }
    // Tensors must tile the data region exactly: no gaps, no trailing bytes.
    // This is what pins the header length down to the byte.
    std::uint64_t cursor = 0;
    for (const TensorMeta* meta : by_offset) {
        if (meta->byte_range.begin != cursor) {
            throw FormatError(fmt::format("'{}': tensor '{}' starts at {} but the previous data ends at {}", where,
                                          meta->name, meta->byte_range.begin, cursor));
        }
        cursor = meta->byte_range.end;
    }
    if (cursor != data_size) {
        throw FormatError(fmt::format("'{}': tensors cover {} bytes of a {}-byte data region", where, cursor,
                                      data_size));
    }
    return ckpt;
}

const fs::path& Checkpoint::path() const noexcept { return state_->path; }
const std::vector<TensorMeta>& Checkpoint::tensors() const noexcept { return state_->tensors; }
const Metadata& Checkpoint::metadata() const noexcept { return state_->metadata; }
std::uint64_t Checkpoint::header_length() const noexcept { return state_->header_length; }
std::uint64_t Checkpoint::data_offset() const noexcept { return 8 + state_->header_length; }
std::uint64_t Checkpoint::file_size() const noexcept { return state_->file_size; }
std::uint64_t Checkpoint::parameter_count() const noexcept { return state_->parameter_count; }

const TensorMeta* Checkpoint::find(std::string_view name) const noexcept {
    auto it = state_->index.find(std::string(name));
    return it == state_->index.end() ? nullptr : &state_->tensors[it->second];
}

const TensorMeta& Checkpoint::meta(std::string_view name) const {
    const TensorMeta* m = find(name);
    if (m == nullptr) {
        throw NotFound(fmt::format("tensor '{}' not found in '{}'", name, state_->path.string()));
    }
    return *m;
}

void Checkpoint::pread_exact(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
        const ssize_t n = ::pread(state_->fd->get(), out.data() + done, out.size() - done,
                                  static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError(fmt::format("read failed on '{}': {}", state_->path.string(),
                                      std::strerror(errno)));
        }
        if (n == 0) {
            throw IoError(fmt::format("unexpected end of file in '{}'", state_->path.string()));
        }
        done += static_cast<std::size_t>(n);
    }
}

void Checkpoint::read_f32(const TensorMeta& meta, std::uint64_t first, std::span<float> out) const {
    const std::uint64_t n = meta.numel();
    if (first > n || out.size() > n - first) {
        throw LengthMismatch(fmt::format("read of [{}, {}) outside tensor '{}' of {} elements", first,
                                         first + out.size(), meta.name, n));
    }
    if (out.empty()) return;
    const std::size_t w = width(meta.dtype);
    const std::uint64_t offset = data_offset() + meta.byte_range.begin + first * w;
    if (meta.dtype == DType::F32 && std::endian::native == std::endian::little) {
        pread_exact(offset, std::as_writable_bytes(out));
        return;
    }
    std::vector<std::byte> raw(out.size() * w);
    pread_exact(offset, raw);
    decode_to_f32(meta.dtype, raw, out);
}

std::vector<float> Checkpoint::read_tensor_f32(std::string_view name) const {
    const TensorMeta& m = meta(name);
    std::vector<float> out(m.numel());
    read_f32(m, 0, out);
    return out;
}

std::vector<std::byte> Checkpoint::read_raw(std::string_view name) const {
    const TensorMeta& m = meta(name);
    std::vector<std::byte> out(m.byte_range.size());
    pread_exact(data_offset() + m.byte_range.begin, out);
    return out;
}

// ---------------------------------------------------------------------------
// CheckpointWriter

CheckpointWriter::CheckpointWriter(fs::path out, std::vector<TensorSpec> layout, Metadata metadata)
    : out_(std::move(out)), layout_(std::move(layout)) {
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
        header[std::string(kMetadataKey)] = std::move(meta);
    }

    std::set<std::string_view> names;
    std::uint64_t offset = 0;
    for (const auto& spec : layout_) {
        if (spec.name == kMetadataKey) throw FormatError("tensor may not be named __metadata__");
        if (!names.insert(spec.name).second) {
            throw FormatError(fmt::format("duplicate tensor name '{}'", spec.name));
        }
        const std::uint64_t n = element_count(spec.shape);
        const std::uint64_t bytes = checked_mul(n, width(spec.dtype), spec.name);
        numels_.push_back(n);
        header[spec.name] = {{"dtype", std::string(to_string(spec.dtype))},
                             {"shape", spec.shape},
                             {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }

    std::string text = header.dump();
    // Pad with spaces so the data region starts 8-byte aligned.
    text.append((8 - text.size() % 8) % 8, ' ');

    tmp_ = out_;
    tmp_ += ".partial";
    stream_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!stream_) {
        throw IoError(fmt::format("cannot create '{}': {}", tmp_.string(), std::strerror(errno)));
    }

    std::array<std::byte, 8> prefix{};
    const std::uint64_t h = text.size();
    for (int i = 0; i < 8; ++i) prefix[i] = static_cast<std::byte>((h >> (8 * i)) & 0xffu);
    write_bytes(prefix);
    write_bytes(std::as_bytes(std::span(text.data(), text.size())));
    advance_past_empty();
}

CheckpointWriter::~CheckpointWriter() {
    if (!finished_) {
        stream_.close();
        std::error_code ec;
        fs::remove(tmp_, ec);
    }
}

void CheckpointWriter::write_bytes(std::span<const std::byte> bytes) {
    stream_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!stream_) throw IoError(fmt::format("write failed on '{}'", tmp_.string()));
    hash_.update(bytes);
    bytes_written_ += bytes.size();
}

void CheckpointWriter::advance_past_empty() {
    while (tensor_index_ < layout_.size() && written_in_tensor_ == numels_[tensor_index_]) {
        ++tensor_index_;
        written_in_tensor_ = 0;
    }
}

const TensorSpec* CheckpointWriter::current() const noexcept {
    return tensor_index_ < layout_.size() ? &layout_[tensor_index_] : nullptr;
}

std::uint64_t CheckpointWriter::remaining_in_current() const noexcept {
    return tensor_index_ < layout_.size() ? numels_[tensor_index_] - written_in_tensor_ : 0;
}

void CheckpointWriter::append(std::span<const float> values) {
    if (values.empty()) return;
    if (finished_ || tensor_index_ >= layout_.size()) {
        throw ShapeMismatch(fmt::format("'{}': more data appended than the layout declares", out_.string()));
    }
    const TensorSpec& spec = layout_[tensor_index_];
    if (values.size() > remaining_in_current()) {
        throw ShapeMismatch(fmt::format("chunk of {} elements overruns tensor '{}' ({} remaining)",
                                        values.size(), spec.name, remaining_in_current()));
    }
    scratch_.resize(values.size() * width(spec.dtype));
    encode_from_f32(spec.dtype, values, scratch_);
    write_bytes(scratch_);
    written_in_tensor_ += values.size();
    advance_past_empty();
}

Checkpoint CheckpointWriter::finish() {
    if (finished_) throw IoError(fmt::format("'{}' already finished", out_.string()));
    if (tensor_index_ < layout_.size()) {
        throw ShapeMismatch(fmt::format("tensor '{}' is incomplete: {} of {} elements written",
                                        layout_[tensor_index_].name, written_in_tensor_,
                                        numels_[tensor_index_]));
    }
    stream_.flush();
    stream_.close();
    if (!stream_) throw IoError(fmt::format("closing '{}' failed", tmp_.string()));
    std::error_code ec;
    fs::rename(tmp_, out_, ec);
    if (ec) {
        throw IoError(fmt::format("cannot move '{}' to '{}': {}", tmp_.string(), out_.string(), ec.message()));
    }
    finished_ = true;
    return Checkpoint::open(out_);
}

Checkpoint write_checkpoint(const fs::path& out, std::span<const TensorEntry> tensors,
                            const std::map<std::string, DType>& target_dtypes, const Metadata& metadata) {
    std::vector<TensorSpec> layout;
    layout.reserve(tensors.size());
    for (const auto& entry : tensors) {
        if (entry.values.size() != element_count(entry.meta.shape)) {
            throw ShapeMismatch(fmt::format("tensor '{}' has {} values for shape of {} elements",
                                            entry.meta.name, entry.values.size(),
                                            element_count(entry.meta.shape)));
        }
        auto it = target_dtypes.find(entry.meta.name);
        layout.push_back({entry.meta.name, it != target_dtypes.end() ? it->second : entry.meta.dtype,
                          entry.meta.shape});
    }
    CheckpointWriter writer(out, std::move(layout), metadata);
    for (const auto& entry : tensors) writer.append(entry.values);
    return writer.finish();
}

// ---------------------------------------------------------------------------
// Alignment

AlignmentReport validate_alignment(const Checkpoint& base, std::span<const Checkpoint> models) {
    AlignmentReport report;
    report.rows.reserve(base.tensors().size());
    for (const auto& meta : base.tensors()) {
        report.rows.push_back({meta.name, meta.shape, {meta.dtype}});
    }

    for (std::size_t t = 0; t < models.size(); ++t) {
        const Checkpoint& model = models[t];
        for (std::size_t row = 0; row < base.tensors().size(); ++row) {
            const TensorMeta& b = base.tensors()[row];
            const TensorMeta* m = model.find(b.name);
            if (m == nullptr) {
                throw AlignmentError(t, b.name, AlignmentError::Reason::Missing,
                                     fmt::format("model {} ('{}') is missing tensor '{}'", t, model.path().string(), b.name));
            }
            if (m->shape != b.shape) {
                throw AlignmentError(t, b.name, AlignmentError::Reason::ShapeMismatch,
                                     fmt::format("model {} ('{}'): tensor '{}' shape differs from the base", t,
                                                 model.path().string(), b.name));
            }
            report.rows[row].dtypes.push_back(m->dtype);
        }
        for (const auto& m : model.tensors()) {
            if (base.find(m.name) == nullptr) {
                throw AlignmentError(t, m.name, AlignmentError::Reason::Extra,
                                     fmt::format("model {} ('{}') has tensor '{}' that the base lacks", t,
                                                 model.path().string(), m.name));
            }
        }
    }
    return report;
}

}  // namespace rammerge
