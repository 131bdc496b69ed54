#pragma once

#include "terrapov/common.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace terrapov::raster {

enum class RasterErrc
{
	UnsupportedCompression,
	UnsupportedCrs,
	UnsupportedLayout,
	MalformedHeader,
	TruncatedData,
	NonFiniteValue,
	OutOfBounds,
	NoData,
	EmptyBox,
	GridMismatch,
};

using RasterError = CodedError<RasterErrc>;

// km per degree for the equirectangular approximation.
inline constexpr double kKmPerDegreeLat = 110.574;
inline constexpr double kKmPerDegreeLonEquator = 111.320;

/// Affine north-up georeferencing. Rows advance southward.
struct GeoTransform
{
	double origin_lon = 0.0;
	double origin_lat = 0.0;
	double pixel_width = 1.0 / 120.0;
	double pixel_height = 1.0 / 120.0;

	double center_lon(std::size_t col) const { return origin_lon + (static_cast<double>(col) + 0.5) * pixel_width; }
	double center_lat(std::size_t row) const { return origin_lat - (static_cast<double>(row) + 0.5) * pixel_height; }

	bool operator==(const GeoTransform&) const = default;
};

/// Single-band EPSG:4326 grid, row-major.
struct RasterGrid
{
	std::size_t width = 0;
	std::size_t height = 0;
	GeoTransform transform;
	std::optional<double> nodata;
	std::vector<double> values;

	static constexpr int kEpsg = 4326;

	double at(std::size_t col, std::size_t row) const { return values[row * width + col]; }
	double& at(std::size_t col, std::size_t row) { return values[row * width + col]; }

	bool is_nodata(double v) const
	{
		if (!nodata)
			return false;
		return v == *nodata || (std::isnan(*nodata) && std::isnan(v));
	}

	/// Field-for-field equality, bit-exact on values (NaN compares by bits).
	bool identical(const RasterGrid& other) const;

	/// Throws RasterError(NonFiniteValue / MalformedHeader) on broken invariants.
	void validate() const;
};

enum class ByteOrder
{
	Little,
	Big,
};

enum class SampleType
{
	Float32,
	Float64,
	Int16,
	UInt8,
};

enum class Compression
{
	None,
	Deflate,
};

/// Knobs for the writer. The defaults produce the canonical encoding:
/// little-endian, one strip, uncompressed float32.
struct WriteOptions
{
	ByteOrder byte_order = ByteOrder::Little;
	SampleType sample_type = SampleType::Float32;
	Compression compression = Compression::None;
	/// 0 means a single strip.
	std::size_t rows_per_strip = 0;
	/// Nonzero switches to tiled layout (must be a multiple of 16).
	std::size_t tile_size = 0;
	/// Horizontal differencing predictor; integer sample types only.
	bool predictor = false;
	/// Emitted as GDAL_METADATA scale/offset items; values are encoded as (v - offset) / scale.
	std::optional<double> scale;
	std::optional<double> offset;
};

RasterGrid parse_geotiff(std::span<const std::uint8_t> bytes);
Bytes write_geotiff(const RasterGrid& grid, const WriteOptions& options = {});

RasterGrid load_geotiff(const std::filesystem::path& path);
void save_geotiff(const std::filesystem::path& path, const RasterGrid& grid, const WriteOptions& options = {});

/// Value of the pixel whose cell contains (lat, lon); no interpolation.
double sample_at(const RasterGrid& grid, double lat, double lon);

/// Half extents of a km box in degrees at latitude `lat`.
struct DegreeExtent
{
	double dlat;
	double dlon;
};
DegreeExtent km_to_degrees(double lat, double half_extent_km);

/// Mean of valid pixels whose centers fall in the closed box of
/// `half_extent_km` around (lat, lon).
double box_mean(const RasterGrid& grid, double lat, double lon, double half_extent_km);

/// Elementwise later - earlier; nodata if either side is nodata.
RasterGrid delta_grid(const RasterGrid& earlier, const RasterGrid& later);

} // namespace terrapov::raster
