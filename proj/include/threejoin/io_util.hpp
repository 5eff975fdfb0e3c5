#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>

namespace threejoin {

void ensure_parent_directory(const std::filesystem::path& path);

// Unique sibling path used for write-then-rename.
std::filesystem::path temp_sibling(const std::filesystem::path& path);

// Atomically replaces `path` with `tmp`.
void commit_temp(const std::filesystem::path& tmp,
                 const std::filesystem::path& path);

// Writes `contents` atomically.
void write_text_file(const std::filesystem::path& path, std::string_view contents);

std::string read_text_file(const std::filesystem::path& path);

// Little-endian binary primitives. Readers throw IoError on truncation.
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f32(std::ostream& out, float v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, std::string_view s);  // u32 length + bytes

std::uint16_t read_u16(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
float read_f32(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::byte> bytes,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace threejoin
