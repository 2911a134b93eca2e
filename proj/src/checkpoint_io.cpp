#include "kvprune/checkpoint_io.hpp"

#include "kvprune/errors.hpp"
#include "kvprune/json_io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace kvprune {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

namespace {

void put_u64(std::string & out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back((char) ((v >> (8 * i)) & 0xff));
    }
}

uint64_t get_u64(std::string_view bytes, size_t pos) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= (uint64_t) (unsigned char) bytes[pos + i] << (8 * i);
    }
    return v;
}

void put_payload(std::string & out, const Matrix & m) {
    const size_t n = m.size() * sizeof(double);
    const size_t at = out.size();
    out.resize(at + n);
    if (n) {
        std::memcpy(out.data() + at, m.data(), n);
    }
}

struct Section {
    ojson header;
    std::string_view payload;
};

// Reads "magic | u64 len | json" at pos; payload extends to the end of the manifest.
Section read_section(std::string_view bytes, size_t & pos, std::string_view magic) {
    if (bytes.size() < pos + magic.size() + 8 || bytes.substr(pos, magic.size()) != magic) {
        throw SchemaError("missing " + std::string(magic) + " magic");
    }
    pos += magic.size();
    const uint64_t len = get_u64(bytes, pos);
    pos += 8;
    if (len > bytes.size() - pos) {
        throw SchemaError("truncated " + std::string(magic) + " header");
    }
    Section s;
    try {
        s.header = ojson::parse(bytes.substr(pos, len));
    } catch (const std::exception & e) {
        throw SchemaError(std::string(magic) + " header is not valid JSON: " + e.what());
    }
    pos += len;
    uint64_t payload_bytes = 0;
    for (const auto & t : s.header.at("tensors")) {
        payload_bytes = std::max<uint64_t>(payload_bytes, t.at("offset").get<uint64_t>() + t.at("bytes").get<uint64_t>());
    }
    if (payload_bytes > bytes.size() - pos) {
        throw SchemaError("truncated " + std::string(magic) + " payload");
    }
    s.payload = bytes.substr(pos, payload_bytes);
    pos += payload_bytes;
    return s;
}

Matrix read_tensor(const Section & s, const ojson & entry) {
    const auto shape = entry.at("shape");
    const size_t rows = shape.at(0).get<size_t>(), cols = shape.at(1).get<size_t>();
    const uint64_t off = entry.at("offset").get<uint64_t>(), n = entry.at("bytes").get<uint64_t>();
    if (n != rows * cols * sizeof(double) || off + n > s.payload.size()) {
        throw SchemaError("tensor " + entry.at("name").get<std::string>() + " manifest is inconsistent");
    }
    Matrix m(rows, cols);
    if (n) {
        std::memcpy(m.data(), s.payload.data() + off, n);
    }
    return m;
}

ojson manifest_entry(const std::string & name, const Matrix & m, uint64_t & offset) {
    ojson e;
    e["name"] = name;
    e["shape"] = {m.rows(), m.cols()};
    e["offset"] = offset;
    e["bytes"] = (uint64_t) (m.size() * sizeof(double));
    offset += m.size() * sizeof(double);
    return e;
}

} // namespace

std::string serialize_checkpoint(const Checkpoint & ckpt, const AdapterSet * adapters) {
    ojson header;
    header["format"] = std::string(kCheckpointMagic);
    header["config"] = to_json(ckpt.config);
    header["meta"] = to_json(ckpt.meta);
    ojson blocks = ojson::array();
    for (const auto & b : ckpt.weights.blocks) {
        blocks.push_back({{"channel_map", b.channel_heads}});
    }
    header["blocks"] = blocks;
    ojson tensors = ojson::array();
    uint64_t offset = 0;
    for_each_tensor(ckpt.weights, [&](const std::string & name, const Matrix & m) {
        tensors.push_back(manifest_entry(name, m, offset));
    });
    header["tensors"] = tensors;

    std::string out(kCheckpointMagic);
    const std::string h = header.dump();
    put_u64(out, h.size());
    out += h;
    for_each_tensor(ckpt.weights, [&](const std::string &, const Matrix & m) { put_payload(out, m); });

    if (adapters) {
        ojson ah;
        ah["rank"] = adapters->rank;
        ah["alpha"] = adapters->alpha;
        ojson list = ojson::array();
        ojson at = ojson::array();
        uint64_t aoff = 0;
        for (const auto & a : adapters->adapters) {
            list.push_back({{"target", a.target()}, {"block", a.block}, {"proj", proj_name(a.proj)}, {"rank", a.rank}});
            at.push_back(manifest_entry(a.target() + ".A", a.a, aoff));
            at.push_back(manifest_entry(a.target() + ".B", a.b, aoff));
        }
        ah["adapters"] = list;
        ah["tensors"] = at;
        out += kAdapterMagic;
        const std::string ahs = ah.dump();
        put_u64(out, ahs.size());
        out += ahs;
        for (const auto & a : adapters->adapters) {
            put_payload(out, a.a);
            put_payload(out, a.b);
        }
    }
    return out;
}

CheckpointFile deserialize_checkpoint(std::string_view bytes) {
    CheckpointFile f;
    size_t pos = 0;
    try {
        Section main = read_section(bytes, pos, kCheckpointMagic);
        Checkpoint & ck = f.checkpoint;
        ck.config = model_config_from_json(main.header.at("config"));
        ck.meta = training_meta_from_json(main.header.at("meta"));
        const auto & blocks = main.header.at("blocks");
        ck.weights.blocks.resize(blocks.size());
        for (size_t i = 0; i < blocks.size(); ++i) {
            ck.weights.blocks[i].channel_heads = blocks[i].at("channel_map").get<std::vector<int>>();
        }
        const auto & tensors = main.header.at("tensors");
        size_t idx = 0;
        for_each_tensor(ck.weights, [&](const std::string & name, Matrix & m) {
            if (idx >= tensors.size() || tensors[idx].at("name").get<std::string>() != name) {
                throw SchemaError("manifest entry " + std::to_string(idx) + " should be " + name);
            }
            m = read_tensor(main, tensors[idx++]);
        });
        if (idx != tensors.size()) {
            throw SchemaError("manifest has " + std::to_string(tensors.size() - idx) + " unexpected tensors");
        }
        ck.validate();

        if (pos < bytes.size()) {
            Section ad = read_section(bytes, pos, kAdapterMagic);
            AdapterSet set;
            set.rank = ad.header.at("rank").get<size_t>();
            set.alpha = ad.header.at("alpha").get<double>();
            const auto & list = ad.header.at("adapters");
            const auto & at = ad.header.at("tensors");
            if (at.size() != 2 * list.size()) {
                throw SchemaError("adapter manifest size mismatch");
            }
            for (size_t i = 0; i < list.size(); ++i) {
                Adapter a;
                a.block = list[i].at("block").get<size_t>();
                a.proj = proj_from_name(list[i].at("proj").get<std::string>());
                a.rank = list[i].at("rank").get<size_t>();
                a.a = read_tensor(ad, at[2 * i]);
                a.b = read_tensor(ad, at[2 * i + 1]);
                set.adapters.push_back(std::move(a));
            }
            f.adapters = std::move(set);
        }
        if (pos != bytes.size()) {
            throw SchemaError("trailing bytes after checkpoint sections");
        }
    } catch (const Error &) {
        throw;
    } catch (const std::exception & e) {
        throw SchemaError(std::string("malformed checkpoint: ") + e.what());
    }
    return f;
}

std::string read_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string & path, std::string_view bytes) {
    const std::filesystem::path p(path);
    std::error_code ec;
    if (p.has_parent_path()) {
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out.write(bytes.data(), (std::streamsize) bytes.size());
    if (!out) {
        throw IoError("short write to '" + path + "'");
    }
}

void save_checkpoint(const std::string & path, const Checkpoint & ckpt, const AdapterSet * adapters) {
    write_file(path, serialize_checkpoint(ckpt, adapters));
}

CheckpointFile load_checkpoint_file(const std::string & path) { return deserialize_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::string & path) { return load_checkpoint_file(path).checkpoint; }

std::string content_hash(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static const char * hex = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[(size_t) i] = hex[h & 0xf];
        h >>= 4;
    }
    return s;
}

std::string checkpoint_hash(const Checkpoint & ckpt) { return content_hash(serialize_checkpoint(ckpt)); }

std::string weights_hash(const Checkpoint & ckpt) {
    Checkpoint stripped = ckpt;
    stripped.meta = TrainingMeta{};
    return content_hash(serialize_checkpoint(stripped));
}

} // namespace kvprune
