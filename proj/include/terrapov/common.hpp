#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace terrapov {

using Bytes = std::vector<std::uint8_t>;

class Error : public std::runtime_error
{
public:
	using std::runtime_error::runtime_error;
};

// Error carrying a module-specific code.
template<typename Code>
class CodedError : public Error
{
public:
	CodedError(Code code, const std::string& what)
		: Error(what)
		, code_(code)
	{}
	Code code() const noexcept { return code_; }

private:
	Code code_;
};

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
	z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
	z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
	return z ^ (z >> 31);
}

/// SplitMix64 generator. Every random draw in the library goes through this
/// so that results are reproducible bit-for-bit across platforms.
class SplitMix64
{
public:
	explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

	std::uint64_t next() noexcept
	{
		state_ += 0x9e3779b97f4a7c15ULL;
		return mix64(state_);
	}

	/// Uniform on [0, 1) with 53 random bits.
	double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

	/// Uniform integer on [0, n), n > 0 (rejection sampling, unbiased).
	std::uint64_t below(std::uint64_t n) noexcept
	{
		const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
		std::uint64_t x;
		do {
			x = next();
		} while (x >= limit);
		return x % n;
	}

	/// Standard normal via Box-Muller (one value per call).
	double normal() noexcept;

	bool coin() noexcept { return (next() >> 63) != 0; }

private:
	std::uint64_t state_;
};

/// Combine a seed with further words into a new, well-mixed seed.
std::uint64_t hash_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> words) noexcept;

/// FNV-1a over a string, used to fold identifiers into seeds.
std::uint64_t fnv1a(std::string_view s) noexcept;

/// In-place Fisher-Yates shuffle driven by SplitMix64.
template<typename T>
void shuffle(std::vector<T>& v, SplitMix64& rng)
{
	for (std::size_t i = v.size(); i > 1; --i) {
		const std::size_t j = static_cast<std::size_t>(rng.below(i));
		std::swap(v[i - 1], v[j]);
	}
}

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(std::string_view data);

/// Shortest decimal representation that round-trips exactly.
std::string format_double(double v);

Bytes read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never observe
/// a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_file_atomic(const std::filesystem::path& path, std::string_view data);

} // namespace terrapov
