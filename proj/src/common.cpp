#include "terrapov/common.hpp"

#include <openssl/evp.h>

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <system_error>
#include <thread>

namespace terrapov {

double SplitMix64::normal() noexcept
{
	double u1 = uniform();
	while (u1 <= 0.0)
		u1 = uniform();
	const double u2 = uniform();
	return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t hash_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> words) noexcept
{
	std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc909ULL);
	for (std::uint64_t w : words)
		h = mix64(h ^ (w + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
	return h;
}

std::uint64_t fnv1a(std::string_view s) noexcept
{
	std::uint64_t h = 0xcbf29ce484222325ULL;
	for (unsigned char c : s) {
		h ^= c;
		h *= 0x100000001b3ULL;
	}
	return h;
}

std::string sha256_hex(std::span<const std::uint8_t> data)
{
	std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
	unsigned int len = 0;
	if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
		throw Error("sha256: digest failed");
	static constexpr char hex[] = "0123456789abcdef";
	std::string out;
	out.reserve(len * 2);
	for (unsigned int i = 0; i < len; ++i) {
		out.push_back(hex[md[i] >> 4]);
		out.push_back(hex[md[i] & 0xf]);
	}
	return out;
}

std::string sha256_hex(std::string_view data)
{
	return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

std::string format_double(double v)
{
	if (std::isnan(v))
		return "nan";
	std::array<char, 64> buf{};
	auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
	if (ec != std::errc())
		throw Error("format_double: conversion failed");
	return std::string(buf.data(), end);
}

Bytes read_file(const std::filesystem::path& path)
{
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw Error("cannot open " + path.string());
	return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path)
{
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw Error("cannot open " + path.string());
	return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data)
{
	if (path.has_parent_path())
		std::filesystem::create_directories(path.parent_path());
	auto tmp = path;
	tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out)
			throw Error("cannot write " + tmp.string());
		out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
		if (!out)
			throw Error("write failed for " + tmp.string());
	}
	std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view data)
{
	write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

} // namespace terrapov
