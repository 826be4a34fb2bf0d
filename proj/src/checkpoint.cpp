#include "maskflow/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "maskflow/errors.hpp"

namespace maskflow::ckpt {
namespace {

class Writer {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void bytes(const void* p, std::size_t n) {
        auto b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (n > b_.size() || pos_ > b_.size() - n) throw FormatError("checkpoint truncated");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

struct Header {
    std::uint64_t hash = 0;
    int stage = 0;
    std::vector<TableEntry> table;
};

Header parse_header(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.str(4) != "PLM2") throw FormatError("not a checkpoint (bad magic)");
    std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Header h;
    h.hash = r.u64();
    h.stage = r.i32();
    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        TableEntry e;
        std::uint32_t len = r.u32();
        if (len > 4096) throw FormatError("parameter name too long");
        e.name = r.str(len);
        e.dtype = r.u32();
        if (e.dtype != kDtypeF64) throw FormatError("unsupported dtype code " + std::to_string(e.dtype));
        e.group = group_from_code(static_cast<int>(r.u32()));
        std::uint32_t rank = r.u32();
        if (rank > 8) throw FormatError("tensor rank too large");
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u64());
        e.offset = r.u64();
        e.length = r.u64();
        h.table.push_back(std::move(e));
    }
    const std::uint64_t payload_start = r.pos();
    std::vector<const TableEntry*> order;
    for (const auto& e : h.table) {
        if (e.length != shape_numel(e.shape) * 8) throw FormatError("length/shape mismatch for '" + e.name + "'");
        if (e.offset < payload_start || e.offset > bytes.size() || e.length > bytes.size() - e.offset)
            throw FormatError("entry '" + e.name + "' outside the file");
        order.push_back(&e);
    }
    std::sort(order.begin(), order.end(), [](auto a, auto b) { return a->offset < b->offset; });
    for (std::size_t i = 1; i < order.size(); ++i)
        if (order[i - 1]->offset + order[i - 1]->length > order[i]->offset)
            throw FormatError("overlapping entries '" + order[i - 1]->name + "' and '" + order[i]->name + "'");
    return h;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
    const auto& entries = c.params.entries();
    std::size_t header_size = 4 + 4 + 8 + 4 + 4;
    for (const auto& [name, p] : entries) header_size += 4 + name.size() + 4 + 4 + 4 + 8 * p.value.rank() + 8 + 8;

    Writer w;
    w.bytes("PLM2", 4);
    w.u32(kVersion);
    w.u64(c.config_hash);
    w.i32(c.stage);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = header_size;
    for (const auto& [name, p] : entries) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(kDtypeF64);
        w.u32(static_cast<std::uint32_t>(group_code(p.group)));
        w.u32(static_cast<std::uint32_t>(p.value.rank()));
        for (auto d : p.value.shape()) w.u64(d);
        w.u64(offset);
        w.u64(p.value.size() * 8);
        offset += p.value.size() * 8;
    }
    for (const auto& [name, p] : entries)
        for (double v : p.value.storage()) w.f64(v);
    return std::move(w.out);
}

std::vector<TableEntry> read_table(const std::vector<std::uint8_t>& bytes) { return parse_header(bytes).table; }

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    Header h = parse_header(bytes);
    Checkpoint c;
    c.config_hash = h.hash;
    c.stage = h.stage;
    for (const auto& e : h.table) {
        std::vector<double> data(shape_numel(e.shape));
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::uint64_t v = 0;
            const std::uint8_t* p = bytes.data() + e.offset + 8 * i;
            for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p[k]) << (8 * k);
            data[i] = std::bit_cast<double>(v);
        }
        try {
            c.params.add(e.name, Tensor(e.shape, std::move(data)), e.group);
        } catch (const ArgumentError& ex) {
            throw FormatError(ex.what());
        }
    }
    return c;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for '" + path + "'");
    return bytes;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

void write_text(const std::string& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::string& path) {
    auto b = read_file(path);
    return std::string(b.begin(), b.end());
}

void save(const std::string& path, const Checkpoint& c) { write_file(path, serialize(c)); }

Checkpoint load(const std::string& path) { return deserialize(read_file(path)); }

}  // namespace maskflow::ckpt
