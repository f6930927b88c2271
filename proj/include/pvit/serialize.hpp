#pragma once

// Little-endian binary readers/writers for dataset and checkpoint files.
// Values are written byte-by-byte so files are identical across hosts.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pvit {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("unexpected end of stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of stream");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline std::uint8_t read_u8(std::istream& is) {
    int c = is.get();
    if (c == EOF) throw IoError("unexpected end of stream");
    return static_cast<std::uint8_t>(c);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
    std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
    write_u64(os, v.size());
    for (double x : v) write_f64(os, x);
}

inline std::vector<double> read_f64_vec(std::istream& is) {
    std::uint64_t n = read_u64(is);
    std::vector<double> v(n);
    for (auto& x : v) x = read_f64(is);
    return v;
}

inline void write_i32_vec(std::ostream& os, const std::vector<int>& v) {
    write_u64(os, v.size());
    for (int x : v) write_u32(os, static_cast<std::uint32_t>(x));
}

inline std::vector<int> read_i32_vec(std::istream& is) {
    std::uint64_t n = read_u64(is);
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(read_u32(is));
    return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
    std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw IoError("unexpected end of stream");
    return s;
}

}  // namespace io
}  // namespace pvit
