#pragma once

#include "terrapov/common.hpp"

#include <filesystem>
#include <string>

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir
{
public:
	explicit TempDir(const std::string& tag = "t")
	{
		static std::uint64_t counter = 0;
		terrapov::SplitMix64 rng(reinterpret_cast<std::uintptr_t>(this) ^ ++counter ^
		                         static_cast<std::uint64_t>(std::filesystem::file_time_type::clock::now().time_since_epoch().count()));
		path_ = std::filesystem::temp_directory_path() / ("terrapov-" + tag + "-" + std::to_string(rng.next() % 100000000));
		std::filesystem::create_directories(path_);
	}
	~TempDir()
	{
		std::error_code ec;
		std::filesystem::remove_all(path_, ec);
	}
	TempDir(const TempDir&) = delete;
	TempDir& operator=(const TempDir&) = delete;

	const std::filesystem::path& path() const { return path_; }
	std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
	std::filesystem::path path_;
};

} // namespace testutil
