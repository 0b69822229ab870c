#include "kpu/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace kpu {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void put(std::vector<std::byte>& out, U v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U get(std::span<const std::byte> bytes, std::size_t at) {
    U v;
    std::memcpy(&v, bytes.data() + at, sizeof(U));
    return v;
}

} // namespace

std::vector<std::byte> encode_checkpoint(const NamedTensors<float>& tensors, const nlohmann::json& meta) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (name == kCheckpointMetaKey) throw CheckpointError("tensor name '" + name + "' is reserved");
        if (header.contains(name)) throw CheckpointError("duplicate tensor name '" + name + "'");
        header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}};
        offset += t.size() * sizeof(float);
    }
    header[kCheckpointMetaKey] = meta;
    const std::string text = header.dump();

    std::vector<std::byte> out;
    out.reserve(20 + text.size() + offset + 8);
    for (char c : kCheckpointMagic) out.push_back(static_cast<std::byte>(c));
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    const auto* h = reinterpret_cast<const std::byte*>(text.data());
    out.insert(out.end(), h, h + text.size());
    const std::size_t payload_start = out.size();
    for (const auto& [name, t] : tensors) {
        const auto bytes = std::as_bytes(t.data());
        out.insert(out.end(), bytes.begin(), bytes.end());
    }
    put(out, fnv1a(std::span(out).subspan(payload_start)));
    return out;
}

CheckpointContents decode_checkpoint(std::span<const std::byte> bytes) {
    if (bytes.size() < 16) throw CheckpointError("checkpoint truncated: missing preamble");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
    const auto version = get<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    const auto header_len = get<std::uint64_t>(bytes, 8);
    if (header_len > bytes.size() - 16) throw CheckpointError("checkpoint truncated: header length exceeds file");
    const std::size_t payload_start = 16 + header_len;
    if (bytes.size() - payload_start < 8) throw CheckpointError("checkpoint truncated: missing checksum");
    const std::size_t payload_len = bytes.size() - payload_start - 8;

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data() + 16), header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
    }
    if (!header.is_object()) throw CheckpointError("checkpoint: header is not an object");

    const auto payload = bytes.subspan(payload_start, payload_len);
    if (fnv1a(payload) != get<std::uint64_t>(bytes, payload_start + payload_len))
        throw CheckpointError("checkpoint: checksum mismatch");

    // Order tensors by offset so the in-memory order matches the file.
    std::map<std::uint64_t, std::string> by_offset;
    CheckpointContents out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == kCheckpointMetaKey) {
            out.meta = it.value();
            continue;
        }
        const auto& e = it.value();
        if (!e.is_object() || e.value("dtype", "") != "f32")
            throw CheckpointError("checkpoint: tensor '" + it.key() + "' has unsupported dtype");
        const auto offset = e.at("offset").get<std::uint64_t>();
        if (!by_offset.emplace(offset, it.key()).second)
            throw CheckpointError("checkpoint: overlapping tensor '" + it.key() + "'");
    }
    std::uint64_t expected = 0;
    for (const auto& [offset, name] : by_offset) {
        const Shape shape = header[name].at("shape").get<Shape>();
        const std::uint64_t len = numel(shape) * sizeof(float);
        if (offset != expected) throw CheckpointError("checkpoint: non-contiguous payload at '" + name + "'");
        if (offset + len > payload_len) throw CheckpointError("checkpoint truncated: tensor '" + name + "'");
        std::vector<float> data(numel(shape));
        std::memcpy(data.data(), payload.data() + offset, len);
        out.tensors.emplace_back(name, Tensor<float>(shape, std::move(data)));
        expected = offset + len;
    }
    if (expected != payload_len) throw CheckpointError("checkpoint: trailing payload bytes");
    return out;
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors<float>& tensors,
                      const nlohmann::json& meta) {
    const auto bytes = encode_checkpoint(tensors, meta);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(std::as_bytes(std::span(raw)));
}

void assign_by_name(NamedTensors<float>& dst, const NamedTensors<float>& src,
                    const std::vector<std::string>& allow_prefixes) {
    std::map<std::string, Tensor<float>*> slots;
    for (auto& [name, t] : dst) slots[name] = &t;
    std::set<std::string> seen;
    for (const auto& [name, t] : src) {
        auto it = slots.find(name);
        if (it == slots.end()) {
            bool allowed = false;
            for (const auto& p : allow_prefixes) allowed = allowed || name.rfind(p, 0) == 0;
            if (!allowed) throw CheckpointError("checkpoint: unknown tensor name '" + name + "'");
            continue;
        }
        if (it->second->shape() != t.shape())
            throw CheckpointError("checkpoint: shape mismatch for '" + name + "': " + to_string(t.shape()) +
                                  " vs " + to_string(it->second->shape()));
        auto d = it->second->mutable_data();
        std::memcpy(d.data(), t.data().data(), t.data().size_bytes());
        seen.insert(name);
    }
    for (const auto& [name, t] : dst)
        if (!seen.count(name)) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
}

} // namespace kpu
