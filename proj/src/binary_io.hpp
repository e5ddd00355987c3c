#pragma once

#include "qexp/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace qexp::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

inline std::uint64_t fnv1a64(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

class ByteWriter {
public:
    template <typename T>
    void pod(T value)
    {
        static_assert(std::is_trivially_copyable_v<T>);
        char raw[sizeof(T)];
        std::memcpy(raw, &value, sizeof(T));
        out_.append(raw, sizeof(T));
    }

    void str(std::string_view s)
    {
        pod(static_cast<std::uint32_t>(s.size()));
        out_.append(s);
    }

    void raw(std::string_view s) { out_.append(s); }

    // Appends the FNV-1a checksum of everything written so far.
    void seal() { pod(fnv1a64(out_)); }

    const std::string& bytes() const { return out_; }

private:
    std::string out_;
};

// Bounds-checked reader; every overrun is a FormatError naming `what`.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T pod()
    {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string str()
    {
        const auto len = pod<std::uint32_t>();
        need(len);
        std::string s(bytes_.substr(pos_, len));
        pos_ += len;
        return s;
    }

    std::string_view raw(std::size_t n)
    {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

    [[noreturn]] void fail(const std::string& why) const
    {
        throw FormatError("corrupt " + what_ + ": " + why + " (at byte " + std::to_string(pos_) + ")");
    }

private:
    void need(std::size_t n) const
    {
        if (n > remaining()) fail("unexpected end of data");
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

// Splits off and verifies the trailing 8-byte checksum.
inline std::string_view verify_sealed(std::string_view bytes, const std::string& what)
{
    if (bytes.size() < sizeof(std::uint64_t))
        throw FormatError("corrupt " + what + ": file too short");
    const auto body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
    if (stored != fnv1a64(body)) throw FormatError("corrupt " + what + ": checksum mismatch (truncated or damaged)");
    return body;
}

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace qexp::detail
