#include "fer/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace fer {
namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'E', 'R', 'M'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                  std::to_string(pos_));
        }
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::uint32_t u32(const char* what)
    {
        auto s = take(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
        }
        return v;
    }

    std::uint64_t u64(const char* what)
    {
        auto s = take(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
        }
        return v;
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t position() const { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

void check_header(Reader& r)
{
    auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw CheckpointError("not a checkpoint: bad magic (expected \"FERM\")");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
}

}  // namespace

std::uint64_t architecture_fingerprint(const ArchConfig& arch)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint8_t b) {
        h ^= b;
        h *= 0x100000001b3ULL;
    };
    auto feed_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            feed(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    };
    for (const ParamSpec& spec : parameter_layout(arch)) {
        for (char c : spec.name) {
            feed(static_cast<std::uint8_t>(c));
        }
        feed(0);
        feed_u32(static_cast<std::uint32_t>(spec.shape.size()));
        for (std::size_t d : spec.shape) {
            feed_u32(static_cast<std::uint32_t>(d));
        }
    }
    return h;
}

template <typename T>
std::vector<std::uint8_t> save_checkpoint(const FerNetwork<T>& net)
{
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_u32(out, kCheckpointVersion);
    put_u64(out, architecture_fingerprint(net.arch()));
    for (const ParamSpec& spec : parameter_layout(net.arch())) {
        const BasicTensor<T>& t = spec.trainable ? net.params().at(spec.name) : net.buffers().at(spec.name);
        put_u32(out, static_cast<std::uint32_t>(spec.name.size()));
        out.insert(out.end(), spec.name.begin(), spec.name.end());
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            put_u32(out, static_cast<std::uint32_t>(d));
        }
        for (T v : t.data()) {
            if (!std::isfinite(v)) {
                throw CheckpointError("refusing to save non-finite value in '" + spec.name + "'");
            }
            put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    return out;
}

template <typename T>
FerNetwork<T> load_checkpoint(std::span<const std::uint8_t> bytes, const ArchConfig& arch)
{
    Reader r(bytes);
    check_header(r);
    const std::uint64_t stored = r.u64("fingerprint");
    const std::uint64_t expected = architecture_fingerprint(arch);
    if (stored != expected) {
        throw CheckpointError("architecture fingerprint mismatch: checkpoint does not match preset '" + arch.name +
                              "'");
    }
    LayerParams<T> params;
    LayerParams<T> buffers;
    for (const ParamSpec& spec : parameter_layout(arch)) {
        const std::uint32_t len = r.u32("name length");
        auto name_bytes = r.take(len, "name");
        const std::string name(name_bytes.begin(), name_bytes.end());
        if (name != spec.name) {
            throw CheckpointError("expected tensor '" + spec.name + "' but found '" + name + "'");
        }
        const std::uint32_t rank = r.u32("rank");
        if (rank != spec.shape.size()) {
            throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
        }
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(r.u32("dims"));
        }
        if (shape != spec.shape) {
            throw CheckpointError("tensor '" + name + "' has shape " + shape_to_string(shape) + ", expected " +
                                  shape_to_string(spec.shape));
        }
        std::vector<T> values(shape_size(shape));
        for (T& v : values) {
            const float f = std::bit_cast<float>(r.u32("values"));
            if (!std::isfinite(f)) {
                throw CheckpointError("non-finite value in tensor '" + name + "'");
            }
            v = static_cast<T>(f);
        }
        (spec.trainable ? params : buffers).emplace(name, BasicTensor<T>(std::move(shape), std::move(values)));
    }
    if (!r.done()) {
        throw CheckpointError("unexpected trailing data at byte " + std::to_string(r.position()));
    }
    return FerNetwork<T>(arch, std::move(params), std::move(buffers));
}

std::uint64_t read_fingerprint(std::span<const std::uint8_t> bytes)
{
    Reader r(bytes);
    check_header(r);
    return r.u64("fingerprint");
}

std::optional<ArchConfig> detect_architecture(std::span<const std::uint8_t> bytes)
{
    const std::uint64_t fp = read_fingerprint(bytes);
    for (const char* name : {"paper", "tiny"}) {
        ArchConfig arch = ArchConfig::preset(name);
        if (architecture_fingerprint(arch) == fp) {
            return arch;
        }
    }
    return std::nullopt;
}

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError("cannot write '" + path.string() + "'");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw CheckpointError("failed writing '" + path.string() + "'");
    }
}

template std::vector<std::uint8_t> save_checkpoint(const FerNetwork<float>&);
template std::vector<std::uint8_t> save_checkpoint(const FerNetwork<double>&);
template FerNetwork<float> load_checkpoint(std::span<const std::uint8_t>, const ArchConfig&);
template FerNetwork<double> load_checkpoint(std::span<const std::uint8_t>, const ArchConfig&);

}  // namespace fer
