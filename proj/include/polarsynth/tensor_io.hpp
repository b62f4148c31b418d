#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "polarsynth/crc32.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/grid.hpp"

namespace polarsynth::io {

// Portable tensor file: one-line UTF-8 header, then a raw little-endian f32
// payload. Header tokens are space-separated key=value pairs, e.g.
//   PTNS1 dtype=f32 endian=little shape=2,64,64 axes=reim,y,x units=none crc32=1A2B3C4D
// Extra tokens (pitch=..., wavelength=...) are carried through verbatim.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<std::string> axes;
    std::string units = "none";
    std::vector<float> data;
    std::map<std::string, std::string> extra;

    int64_t count() const {
        int64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

namespace detail {
inline bool is_little_endian() {
    uint16_t x = 1;
    uint8_t b;
    std::memcpy(&b, &x, 1);
    return b == 1;
}
inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else cur.push_back(c);
    }
    out.push_back(cur);
    return out;
}
} // namespace detail

inline void write_tensor(const std::string& path, const Tensor& t) {
    if (t.count() != static_cast<int64_t>(t.data.size()))
        throw IoError("write_tensor: shape/payload mismatch for " + path);
    std::ostringstream head;
    head << "PTNS1 dtype=f32 endian=little shape=";
    for (size_t i = 0; i < t.shape.size(); ++i) head << (i ? "," : "") << t.shape[i];
    head << " axes=";
    for (size_t i = 0; i < t.axes.size(); ++i) head << (i ? "," : "") << t.axes[i];
    head << " units=" << (t.units.empty() ? "none" : t.units);
    std::vector<float> payload = t.data;
    if (!detail::is_little_endian())
        for (auto& f : payload) {
            uint32_t u;
            std::memcpy(&u, &f, 4);
            u = __builtin_bswap32(u);
            std::memcpy(&f, &u, 4);
        }
    uint32_t crc = crc32(payload.data(), payload.size() * 4);
    char crcbuf[16];
    std::snprintf(crcbuf, sizeof crcbuf, "%08X", crc);
    head << " crc32=" << crcbuf;
    for (const auto& [k, v] : t.extra) head << " " << k << "=" << v;
    head << "\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_tensor: cannot open " + path);
    const std::string h = head.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * 4));
    if (!f) throw IoError("write_tensor: write failed for " + path);
}

inline Tensor read_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_tensor: cannot open " + path);
    std::string header;
    if (!std::getline(f, header)) throw IoError("read_tensor: missing header in " + path);
    auto tokens = detail::split(header, ' ');
    if (tokens.empty() || tokens[0] != "PTNS1")
        throw IoError("read_tensor: bad magic in " + path);
    Tensor t;
    std::string crc_hex;
    for (size_t i = 1; i < tokens.size(); ++i) {
        auto eq = tokens[i].find('=');
        if (eq == std::string::npos) throw IoError("read_tensor: malformed token in " + path);
        std::string k = tokens[i].substr(0, eq), v = tokens[i].substr(eq + 1);
        if (k == "dtype") {
            if (v != "f32") throw IoError("read_tensor: unsupported dtype " + v);
        } else if (k == "endian") {
            if (v != "little") throw IoError("read_tensor: unsupported endianness " + v);
        } else if (k == "shape") {
            for (auto& s : detail::split(v, ','))
                if (!s.empty()) t.shape.push_back(std::stoll(s));
        } else if (k == "axes") {
            for (auto& s : detail::split(v, ','))
                if (!s.empty()) t.axes.push_back(s);
        } else if (k == "units") {
            t.units = v;
        } else if (k == "crc32") {
            crc_hex = v;
        } else {
            t.extra[k] = v;
        }
    }
    int64_t n = t.count();
    if (t.shape.empty() || n <= 0) throw IoError("read_tensor: bad shape in " + path);
    std::vector<float> payload(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * 4));
    if (f.gcount() != static_cast<std::streamsize>(n * 4))
        throw IoError("read_tensor: truncated payload in " + path);
    char probe;
    if (f.read(&probe, 1))
        throw IoError("read_tensor: trailing bytes in " + path);
    if (!crc_hex.empty()) {
        uint32_t want = static_cast<uint32_t>(std::stoul(crc_hex, nullptr, 16));
        uint32_t got = crc32(payload.data(), payload.size() * 4);
        if (want != got) throw IoError("read_tensor: checksum mismatch in " + path);
    }
    if (!detail::is_little_endian())
        for (auto& fl : payload) {
            uint32_t u;
            std::memcpy(&u, &fl, 4);
            u = __builtin_bswap32(u);
            std::memcpy(&fl, &u, 4);
        }
    t.data = std::move(payload);
    return t;
}

inline Tensor tensor_from_grid(const RGrid& g, std::string axes_y = "y", std::string axes_x = "x") {
    Tensor t;
    t.shape = {g.rows(), g.cols()};
    t.axes = {std::move(axes_y), std::move(axes_x)};
    t.data.resize(g.size());
    for (size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<float>(g[i]);
    return t;
}

inline RGrid grid_from_tensor(const Tensor& t) {
    if (t.shape.size() != 2) throw IoError("grid_from_tensor: expected rank-2 tensor");
    RGrid g(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    for (size_t i = 0; i < g.size(); ++i) g[i] = t.data[i];
    return g;
}

// Complex fields travel as [reim, y, x] with the real plane first.
inline Tensor tensor_from_cgrid(const CGrid& g) {
    Tensor t;
    t.shape = {2, g.rows(), g.cols()};
    t.axes = {"reim", "y", "x"};
    t.data.resize(2 * g.size());
    for (size_t i = 0; i < g.size(); ++i) {
        t.data[i] = static_cast<float>(g[i].real());
        t.data[g.size() + i] = static_cast<float>(g[i].imag());
    }
    return t;
}

inline CGrid cgrid_from_tensor(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 2)
        throw IoError("cgrid_from_tensor: expected [2,y,x] tensor");
    CGrid g(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
    for (size_t i = 0; i < g.size(); ++i)
        g[i] = cplx(t.data[i], t.data[g.size() + i]);
    return g;
}

} // namespace polarsynth::io
