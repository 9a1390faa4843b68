#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace facegen {

// Thrown for unreadable/unwritable/corrupt files. CLI exit code 4.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown for numeric failures: non-finite values where finiteness is
// required, diverging optimizations, failed gradient checks. CLI exit code 3.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sentinel for a group whose label is missing on an example.
inline constexpr int kUnlabeled = -1;

// Little-endian byte packing used by every binary file format in the project.
void put_u32(std::string& out, std::uint32_t v);
void put_f64(std::string& out, double v);
std::uint32_t get_u32(const std::string& in, std::size_t& pos);
double get_f64(const std::string& in, std::size_t& pos);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target, so a failed run
// never leaves a partial artifact behind.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace facegen
