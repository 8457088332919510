#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <string_view>

namespace unifier {

/// 64-bit FNV-1a, hex encoded. Used as the content hash in manifests.
std::string content_hash(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);
/// Hash over every regular file below `dir`, visited in sorted path order.
std::string directory_hash(const std::filesystem::path& dir);

/// Uniform integer in [0, n) from a 64-bit engine; unlike
/// std::uniform_int_distribution the draw sequence is fixed across standard
/// libraries.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);
double uniform_unit(std::mt19937_64& rng);
double standard_normal(std::mt19937_64& rng);

/// Worker count for parallel sections; 1 means run inline.
void set_thread_count(std::size_t n);
std::size_t thread_count();

/// Runs body(i) for i in [0, n) over thread_count() workers. Each index is
/// visited exactly once; results must be written to per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

/// Writes to `path + ".tmp"` then renames, so readers never see a partial file.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace unifier
