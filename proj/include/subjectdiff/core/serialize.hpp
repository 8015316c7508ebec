#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "subjectdiff/core/rng.hpp"

namespace sdg {

using json = nlohmann::ordered_json;

// Single-file archive: json metadata followed by named float blobs.
// Tensors are stored as f32 or f64 with explicit shapes.
struct Archive {
    json meta;
    struct Blob {
        std::string dtype;  // "f32" | "f64"
        std::vector<int> shape;
        std::vector<char> bytes;
    };
    std::map<std::string, Blob> blobs;

    template <typename T>
    void put(const std::string& name, const std::vector<int>& shape, const T* data, size_t n) {
        Blob b;
        b.dtype = sizeof(T) == 4 ? "f32" : "f64";
        b.shape = shape;
        b.bytes.resize(n * sizeof(T));
        std::memcpy(b.bytes.data(), data, b.bytes.size());
        blobs[name] = std::move(b);
    }

    bool has(const std::string& name) const { return blobs.count(name) != 0; }

    template <typename T>
    std::vector<T> get(const std::string& name, std::vector<int>* shape_out = nullptr) const {
        auto it = blobs.find(name);
        if (it == blobs.end()) throw std::out_of_range("archive: no blob " + name);
        const Blob& b = it->second;
        const std::string want = sizeof(T) == 4 ? "f32" : "f64";
        if (b.dtype != want) throw std::runtime_error("archive: dtype mismatch for " + name);
        std::vector<T> out(b.bytes.size() / sizeof(T));
        std::memcpy(out.data(), b.bytes.data(), b.bytes.size());
        if (shape_out) *shape_out = b.shape;
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a64(nullptr, 0);
        const std::string m = meta.dump();
        h = fnv1a64(m.data(), m.size(), h);
        for (const auto& [name, b] : blobs) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(b.bytes.data(), b.bytes.size(), h);
        }
        return h;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open for write: " + path);
        const char magic[8] = {'S', 'D', 'G', 'A', 'R', 'C', 'H', '1'};
        f.write(magic, 8);
        const std::string m = meta.dump();
        write_u64(f, m.size());
        f.write(m.data(), static_cast<std::streamsize>(m.size()));
        write_u64(f, blobs.size());
        for (const auto& [name, b] : blobs) {
            write_str(f, name);
            write_str(f, b.dtype);
            write_u64(f, b.shape.size());
            for (int d : b.shape) write_u64(f, static_cast<uint64_t>(d));
            write_u64(f, b.bytes.size());
            f.write(b.bytes.data(), static_cast<std::streamsize>(b.bytes.size()));
        }
        if (!f) throw std::runtime_error("write failed: " + path);
    }

    static Archive load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open: " + path);
        char magic[8];
        f.read(magic, 8);
        if (std::memcmp(magic, "SDGARCH1", 8) != 0) throw std::runtime_error("bad archive magic: " + path);
        Archive a;
        std::string m(read_u64(f), '\0');
        f.read(m.data(), static_cast<std::streamsize>(m.size()));
        a.meta = json::parse(m);
        const uint64_t n = read_u64(f);
        for (uint64_t i = 0; i < n; i++) {
            std::string name = read_str(f);
            Blob b;
            b.dtype = read_str(f);
            const uint64_t nd = read_u64(f);
            b.shape.resize(nd);
            for (auto& d : b.shape) d = static_cast<int>(read_u64(f));
            b.bytes.resize(read_u64(f));
            f.read(b.bytes.data(), static_cast<std::streamsize>(b.bytes.size()));
            a.blobs[name] = std::move(b);
        }
        if (!f) throw std::runtime_error("truncated archive: " + path);
        return a;
    }

private:
    static void write_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
    static uint64_t read_u64(std::ifstream& f) {
        uint64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    }
    static void write_str(std::ofstream& f, const std::string& s) {
        write_u64(f, s.size());
        f.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    static std::string read_str(std::ifstream& f) {
        std::string s(read_u64(f), '\0');
        f.read(s.data(), static_cast<std::streamsize>(s.size()));
        return s;
    }
};

}  // namespace sdg
