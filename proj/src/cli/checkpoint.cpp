#include "seqdiff/cli/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <zlib.h>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', 'K'};
constexpr std::uint8_t kF32 = 0;

template <typename UInt>
void put(std::string& out, UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    template <typename UInt>
    UInt get() {
        need(sizeof(UInt));
        UInt v = 0;
        for (std::size_t i = 0; i < sizeof(UInt); ++i) {
            v |= static_cast<UInt>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(UInt);
        return v;
    }

    std::string take(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return end_ - pos_; }

private:
    void need(std::size_t n) const {
        if (n > end_ - pos_) throw CorruptFileError("checkpoint: truncated at byte " + std::to_string(pos_));
    }

    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(const std::string& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
    std::size_t left = bytes.size();
    while (left > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        left -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
    out += ckpt.config_json;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    std::set<std::string> seen;
    for (const auto& t : ckpt.tensors) {
        if (t.name.empty() || t.name.size() > 0xFFFF) throw ContractError("checkpoint: bad tensor name");
        if (!seen.insert(t.name).second) throw ContractError("checkpoint: duplicate tensor " + t.name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out += t.name;
        put<std::uint8_t>(out, kF32);
        put<std::uint8_t>(out, 2);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
        for (Index i = 0; i < t.value.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, t.value.data() + i, 4);
            put<std::uint32_t>(out, bits);
        }
    }
    put<std::uint32_t>(out, crc32_of(out));
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 4 + 4 + 4) throw CorruptFileError("checkpoint: file too short");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptFileError("checkpoint: bad magic");
    const std::size_t body = bytes.size() - 4;
    Reader tail(bytes, bytes.size());
    (void)tail.take(body);
    const auto stored = tail.get<std::uint32_t>();
    if (crc32_of(bytes.substr(0, body)) != stored) throw CorruptFileError("checkpoint: CRC mismatch");

    Reader r(bytes, body);
    (void)r.take(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: format version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    }
    Checkpoint ckpt;
    ckpt.config_json = r.take(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    std::set<std::string> seen;
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedTensor t;
        t.name = r.take(r.get<std::uint16_t>());
        if (!seen.insert(t.name).second) throw CorruptFileError("checkpoint: duplicate tensor " + t.name);
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != kF32) throw VersionError("checkpoint: unknown dtype code " + std::to_string(dtype));
        const auto rank = r.get<std::uint8_t>();
        if (rank < 1 || rank > 2) throw CorruptFileError("checkpoint: unsupported rank " + std::to_string(rank));
        std::uint64_t dims[2] = {1, 1};
        for (std::uint8_t d = 0; d < rank; ++d) dims[2 - rank + d] = r.get<std::uint64_t>();
        if (dims[0] != 0 && dims[1] > r.remaining() / 4 / dims[0]) {
            throw CorruptFileError("checkpoint: tensor " + t.name + " exceeds the file");
        }
        t.value.resize(static_cast<Index>(dims[0]), static_cast<Index>(dims[1]));
        for (Index i = 0; i < t.value.size(); ++i) {
            const auto bits = r.get<std::uint32_t>();
            std::memcpy(t.value.data() + i, &bits, 4);
        }
        ckpt.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw CorruptFileError("checkpoint: trailing bytes");
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::remove(tmp.c_str());
            throw DataError("checkpoint: write failed for " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw DataError("checkpoint: cannot rename onto " + path + ": " + ec.message());
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_checkpoint(buf.str());
}

}  // namespace seqdiff
