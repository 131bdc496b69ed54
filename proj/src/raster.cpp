#include "terrapov/raster.hpp"

#include <algorithm>
#include <cstring>
#include <numbers>

namespace terrapov::raster {

namespace {

bool same_bits(double a, double b)
{
	return std::memcmp(&a, &b, sizeof(double)) == 0;
}

// Index range [lo, hi) of cells whose centers could fall in [a, b] along one
// axis; the exact center test is applied by the caller.
std::pair<std::size_t, std::size_t> candidate_range(double a, double b, std::size_t n)
{
	const double lo = std::floor(a - 0.5) - 1.0;
	const double hi = std::ceil(b - 0.5) + 2.0;
	const auto clamp = [n](double v) {
		return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n)));
	};
	return {clamp(lo), clamp(hi)};
}

} // namespace

bool RasterGrid::identical(const RasterGrid& other) const
{
	if (width != other.width || height != other.height || !(transform == other.transform))
		return false;
	if (nodata.has_value() != other.nodata.has_value())
		return false;
	if (nodata && !same_bits(*nodata, *other.nodata))
		return false;
	if (values.size() != other.values.size())
		return false;
	for (std::size_t i = 0; i < values.size(); ++i)
		if (!same_bits(values[i], other.values[i]))
			return false;
	return true;
}

void RasterGrid::validate() const
{
	if (values.size() != width * height)
		throw RasterError(RasterErrc::MalformedHeader, "raster: value count does not match width*height");
	if (!(transform.pixel_width > 0.0) || !(transform.pixel_height > 0.0))
		throw RasterError(RasterErrc::MalformedHeader, "raster: pixel size must be positive");
	for (std::size_t i = 0; i < values.size(); ++i) {
		if (!is_nodata(values[i]) && !std::isfinite(values[i]))
			throw RasterError(RasterErrc::NonFiniteValue,
			                  "raster: non-finite value at pixel " + std::to_string(i) + " without matching nodata");
	}
}

double sample_at(const RasterGrid& grid, double lat, double lon)
{
	const auto& t = grid.transform;
	const double fx = (lon - t.origin_lon) / t.pixel_width;
	const double fy = (t.origin_lat - lat) / t.pixel_height;
	if (!(fx >= 0.0) || !(fy >= 0.0) || fx >= static_cast<double>(grid.width) || fy >= static_cast<double>(grid.height))
		throw RasterError(RasterErrc::OutOfBounds,
		                  "raster: (" + format_double(lat) + ", " + format_double(lon) + ") outside grid extent");
	const double v = grid.at(static_cast<std::size_t>(fx), static_cast<std::size_t>(fy));
	if (grid.is_nodata(v))
		throw RasterError(RasterErrc::NoData, "raster: nodata at (" + format_double(lat) + ", " + format_double(lon) + ")");
	return v;
}

DegreeExtent km_to_degrees(double lat, double half_extent_km)
{
	const double coslat = std::cos(lat * std::numbers::pi / 180.0);
	return {half_extent_km / kKmPerDegreeLat, half_extent_km / (kKmPerDegreeLonEquator * coslat)};
}

double box_mean(const RasterGrid& grid, double lat, double lon, double half_extent_km)
{
	if (!(half_extent_km > 0.0))
		throw Error("box_mean: half extent must be positive");
	const auto [dlat, dlon] = km_to_degrees(lat, half_extent_km);
	const double lat_lo = lat - dlat, lat_hi = lat + dlat;
	const double lon_lo = lon - dlon, lon_hi = lon + dlon;
	const auto& t = grid.transform;

	const auto [r0, r1] = candidate_range((t.origin_lat - lat_hi) / t.pixel_height, (t.origin_lat - lat_lo) / t.pixel_height, grid.height);
	const auto [c0, c1] = candidate_range((lon_lo - t.origin_lon) / t.pixel_width, (lon_hi - t.origin_lon) / t.pixel_width, grid.width);

	double sum = 0.0;
	std::size_t n = 0;
	for (std::size_t row = r0; row < r1; ++row) {
		const double clat = t.center_lat(row);
		if (clat < lat_lo || clat > lat_hi)
			continue;
		for (std::size_t col = c0; col < c1; ++col) {
			const double clon = t.center_lon(col);
			if (clon < lon_lo || clon > lon_hi)
				continue;
			const double v = grid.at(col, row);
			if (grid.is_nodata(v))
				continue;
			sum += v;
			++n;
		}
	}
	if (n == 0)
		throw RasterError(RasterErrc::EmptyBox,
		                  "box_mean: no valid pixel center within " + format_double(half_extent_km) + " km of (" +
		                      format_double(lat) + ", " + format_double(lon) + ")");
	return sum / static_cast<double>(n);
}

RasterGrid delta_grid(const RasterGrid& earlier, const RasterGrid& later)
{
	constexpr double tol = 1e-9;
	const auto& a = earlier.transform;
	const auto& b = later.transform;
	if (earlier.width != later.width || earlier.height != later.height)
		throw RasterError(RasterErrc::GridMismatch,
		                  "delta_grid: shape " + std::to_string(earlier.width) + "x" + std::to_string(earlier.height) + " vs " +
		                      std::to_string(later.width) + "x" + std::to_string(later.height));
	if (std::abs(a.origin_lon - b.origin_lon) > tol || std::abs(a.origin_lat - b.origin_lat) > tol ||
	    std::abs(a.pixel_width - b.pixel_width) > tol || std::abs(a.pixel_height - b.pixel_height) > tol)
		throw RasterError(RasterErrc::GridMismatch, "delta_grid: geotransforms differ");

	RasterGrid out;
	out.width = earlier.width;
	out.height = earlier.height;
	out.transform = earlier.transform;
	out.nodata = earlier.nodata ? earlier.nodata : later.nodata;
	out.values.resize(earlier.values.size());
	for (std::size_t i = 0; i < out.values.size(); ++i) {
		const double e = earlier.values[i], l = later.values[i];
		out.values[i] = (earlier.is_nodata(e) || later.is_nodata(l)) ? *out.nodata : l - e;
	}
	return out;
}

} // namespace terrapov::raster
