// Constrained GeoTIFF reader/writer: one single-band image, strip or tile
// layout, no compression or Deflate, EPSG:4326 only.

#include "terrapov/raster.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <map>
#include <string>

namespace terrapov::raster {

namespace {

namespace tag {
constexpr std::uint16_t ImageWidth = 256;
constexpr std::uint16_t ImageLength = 257;
constexpr std::uint16_t BitsPerSample = 258;
constexpr std::uint16_t Compression = 259;
constexpr std::uint16_t Photometric = 262;
constexpr std::uint16_t StripOffsets = 273;
constexpr std::uint16_t SamplesPerPixel = 277;
constexpr std::uint16_t RowsPerStrip = 278;
constexpr std::uint16_t StripByteCounts = 279;
constexpr std::uint16_t PlanarConfig = 284;
constexpr std::uint16_t Predictor = 317;
constexpr std::uint16_t TileWidth = 322;
constexpr std::uint16_t TileLength = 323;
constexpr std::uint16_t TileOffsets = 324;
constexpr std::uint16_t TileByteCounts = 325;
constexpr std::uint16_t SampleFormat = 339;
constexpr std::uint16_t ModelPixelScale = 33550;
constexpr std::uint16_t ModelTiepoint = 33922;
constexpr std::uint16_t ModelTransformation = 34264;
constexpr std::uint16_t GeoKeyDirectory = 34735;
constexpr std::uint16_t GdalMetadata = 42112;
constexpr std::uint16_t GdalNodata = 42113;
} // namespace tag

namespace geokey {
constexpr std::uint16_t ModelType = 1024;
constexpr std::uint16_t RasterType = 1025;
constexpr std::uint16_t GeographicType = 2048;
} // namespace geokey

enum FieldType : std::uint16_t
{
	kByte = 1,
	kAscii = 2,
	kShort = 3,
	kLong = 4,
	kRational = 5,
	kSByte = 6,
	kUndefined = 7,
	kSShort = 8,
	kSLong = 9,
	kSRational = 10,
	kFloat = 11,
	kDouble = 12,
};

std::size_t field_size(std::uint16_t type)
{
	switch (type) {
	case kByte:
	case kAscii:
	case kSByte:
	case kUndefined: return 1;
	case kShort:
	case kSShort: return 2;
	case kLong:
	case kSLong:
	case kFloat: return 4;
	case kRational:
	case kSRational:
	case kDouble: return 8;
	default: return 0;
	}
}

[[noreturn]] void fail(RasterErrc code, const std::string& msg)
{
	throw RasterError(code, "geotiff: " + msg);
}

class Reader
{
public:
	Reader(std::span<const std::uint8_t> bytes, bool big)
		: bytes_(bytes)
		, big_(big)
	{}

	std::size_t size() const { return bytes_.size(); }
	bool big() const { return big_; }

	template<typename T>
	T read(std::size_t off) const
	{
		if (off > bytes_.size() || bytes_.size() - off < sizeof(T))
			fail(RasterErrc::MalformedHeader, "offset " + std::to_string(off) + " past end of file");
		T v;
		std::memcpy(&v, bytes_.data() + off, sizeof(T));
		if (big_ != (std::endian::native == std::endian::big))
			v = byteswap(v);
		return v;
	}

	template<typename T>
	static T byteswap(T v)
	{
		std::uint8_t buf[sizeof(T)];
		std::memcpy(buf, &v, sizeof(T));
		std::reverse(buf, buf + sizeof(T));
		std::memcpy(&v, buf, sizeof(T));
		return v;
	}

	std::span<const std::uint8_t> slice(std::size_t off, std::size_t len, RasterErrc code) const
	{
		if (off > bytes_.size() || bytes_.size() - off < len)
			fail(code, "data block at " + std::to_string(off) + "+" + std::to_string(len) + " past end of file");
		return bytes_.subspan(off, len);
	}

private:
	std::span<const std::uint8_t> bytes_;
	bool big_;
};

struct Entry
{
	std::uint16_t type = 0;
	std::uint32_t count = 0;
	std::size_t data_offset = 0; // absolute offset of the value bytes
};

std::vector<double> numbers(const Reader& r, const Entry& e)
{
	const std::size_t sz = field_size(e.type);
	std::vector<double> out;
	out.reserve(e.count);
	for (std::uint32_t i = 0; i < e.count; ++i) {
		const std::size_t off = e.data_offset + i * sz;
		switch (e.type) {
		case kByte:
		case kUndefined: out.push_back(r.read<std::uint8_t>(off)); break;
		case kSByte: out.push_back(r.read<std::int8_t>(off)); break;
		case kShort: out.push_back(r.read<std::uint16_t>(off)); break;
		case kSShort: out.push_back(r.read<std::int16_t>(off)); break;
		case kLong: out.push_back(r.read<std::uint32_t>(off)); break;
		case kSLong: out.push_back(r.read<std::int32_t>(off)); break;
		case kFloat: out.push_back(r.read<float>(off)); break;
		case kDouble: out.push_back(r.read<double>(off)); break;
		case kRational:
		case kSRational: {
			const double num = e.type == kRational ? double(r.read<std::uint32_t>(off)) : double(r.read<std::int32_t>(off));
			const double den = e.type == kRational ? double(r.read<std::uint32_t>(off + 4)) : double(r.read<std::int32_t>(off + 4));
			out.push_back(num / den);
			break;
		}
		default: fail(RasterErrc::MalformedHeader, "unsupported field type " + std::to_string(e.type));
		}
	}
	return out;
}

std::string ascii(const Reader& r, const Entry& e)
{
	auto s = r.slice(e.data_offset, e.count, RasterErrc::MalformedHeader);
	std::string out(s.begin(), s.end());
	while (!out.empty() && (out.back() == '\0' || out.back() == ' '))
		out.pop_back();
	return out;
}

// GDAL writes scale/offset as <Item ... role="scale">v</Item> inside GDAL_METADATA.
std::optional<double> metadata_item(const std::string& xml, const std::string& role)
{
	const std::string key = "role=\"" + role + "\"";
	auto pos = xml.find(key);
	if (pos == std::string::npos)
		return std::nullopt;
	pos = xml.find('>', pos);
	if (pos == std::string::npos)
		return std::nullopt;
	const auto end = xml.find('<', pos);
	const std::string text = xml.substr(pos + 1, end - pos - 1);
	char* stop = nullptr;
	const double v = std::strtod(text.c_str(), &stop);
	if (stop == text.c_str())
		fail(RasterErrc::MalformedHeader, "bad GDAL_METADATA " + role + " value '" + text + "'");
	return v;
}

std::size_t bytes_per_sample(SampleType t)
{
	switch (t) {
	case SampleType::Float32: return 4;
	case SampleType::Float64: return 8;
	case SampleType::Int16: return 2;
	case SampleType::UInt8: return 1;
	}
	return 0;
}

Bytes inflate_block(std::span<const std::uint8_t> in, std::size_t expected)
{
	Bytes out(expected);
	z_stream zs{};
	if (inflateInit(&zs) != Z_OK)
		fail(RasterErrc::MalformedHeader, "zlib init failed");
	zs.next_in = const_cast<Bytef*>(in.data());
	zs.avail_in = static_cast<uInt>(in.size());
	zs.next_out = out.data();
	zs.avail_out = static_cast<uInt>(out.size());
	const int rc = inflate(&zs, Z_FINISH);
	const std::size_t produced = expected - zs.avail_out;
	inflateEnd(&zs);
	if (rc != Z_STREAM_END && rc != Z_BUF_ERROR && rc != Z_OK)
		fail(RasterErrc::TruncatedData, "deflate stream corrupt");
	if (produced < expected)
		fail(RasterErrc::TruncatedData, "deflate stream produced " + std::to_string(produced) + " of " + std::to_string(expected) + " bytes");
	return out;
}

Bytes deflate_block(std::span<const std::uint8_t> in)
{
	uLongf len = compressBound(static_cast<uLong>(in.size()));
	Bytes out(len);
	if (compress2(out.data(), &len, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
		throw Error("geotiff: deflate failed");
	out.resize(len);
	return out;
}

// Decodes one raw sample (already in native order handling) at `p`.
double decode_sample(const std::uint8_t* p, SampleType t, bool big)
{
	auto load = [&](auto v) {
		std::memcpy(&v, p, sizeof(v));
		if (big != (std::endian::native == std::endian::big))
			v = Reader::byteswap(v);
		return v;
	};
	switch (t) {
	case SampleType::Float32: return load(float{});
	case SampleType::Float64: return load(double{});
	case SampleType::Int16: return load(std::int16_t{});
	case SampleType::UInt8: return *p;
	}
	return 0.0;
}

// Undo horizontal differencing for a chunk of `rows` rows of `cols` samples.
void undo_predictor(Bytes& chunk, std::size_t cols, std::size_t rows, SampleType t, bool big)
{
	if (t == SampleType::UInt8) {
		for (std::size_t r = 0; r < rows; ++r) {
			std::uint8_t* row = chunk.data() + r * cols;
			for (std::size_t c = 1; c < cols; ++c)
				row[c] = static_cast<std::uint8_t>(row[c] + row[c - 1]);
		}
	} else if (t == SampleType::Int16) {
		const bool swap = big != (std::endian::native == std::endian::big);
		for (std::size_t r = 0; r < rows; ++r) {
			std::uint8_t* row = chunk.data() + r * cols * 2;
			std::uint16_t prev = 0;
			for (std::size_t c = 0; c < cols; ++c) {
				std::uint16_t v;
				std::memcpy(&v, row + 2 * c, 2);
				if (swap)
					v = Reader::byteswap(v);
				if (c > 0)
					v = static_cast<std::uint16_t>(v + prev);
				prev = v;
				if (swap)
					v = Reader::byteswap(v);
				std::memcpy(row + 2 * c, &v, 2);
			}
		}
	} else {
		fail(RasterErrc::UnsupportedCompression, "horizontal predictor on floating-point samples");
	}
}

} // namespace

RasterGrid parse_geotiff(std::span<const std::uint8_t> bytes)
{
	if (bytes.size() < 8)
		fail(RasterErrc::MalformedHeader, "file shorter than TIFF header");
	bool big;
	if (bytes[0] == 'I' && bytes[1] == 'I')
		big = false;
	else if (bytes[0] == 'M' && bytes[1] == 'M')
		big = true;
	else
		fail(RasterErrc::MalformedHeader, "bad byte-order mark");
	const Reader r(bytes, big);
	const auto magic = r.read<std::uint16_t>(2);
	if (magic == 43)
		fail(RasterErrc::UnsupportedLayout, "BigTIFF is not supported");
	if (magic != 42)
		fail(RasterErrc::MalformedHeader, "bad magic " + std::to_string(magic));

	const std::size_t ifd = r.read<std::uint32_t>(4);
	if (ifd < 8 || ifd >= bytes.size())
		fail(RasterErrc::MalformedHeader, "IFD offset out of range");
	const std::size_t n_entries = r.read<std::uint16_t>(ifd);
	std::map<std::uint16_t, Entry> tags;
	for (std::size_t i = 0; i < n_entries; ++i) {
		const std::size_t off = ifd + 2 + 12 * i;
		Entry e;
		const auto id = r.read<std::uint16_t>(off);
		e.type = r.read<std::uint16_t>(off + 2);
		e.count = r.read<std::uint32_t>(off + 4);
		const std::size_t sz = field_size(e.type);
		if (sz == 0)
			continue; // unknown field types are skipped, as TIFF readers must
		if (std::uint64_t(sz) * e.count <= 4)
			e.data_offset = off + 8;
		else {
			e.data_offset = r.read<std::uint32_t>(off + 8);
			if (e.data_offset > bytes.size() || bytes.size() - e.data_offset < sz * e.count)
				fail(RasterErrc::MalformedHeader, "tag " + std::to_string(id) + " data past end of file");
		}
		tags[id] = e;
	}

	auto get = [&](std::uint16_t id) -> const Entry* {
		auto it = tags.find(id);
		return it == tags.end() ? nullptr : &it->second;
	};
	auto scalar = [&](std::uint16_t id, std::optional<double> fallback = std::nullopt) -> double {
		const Entry* e = get(id);
		if (!e || e->count == 0) {
			if (fallback)
				return *fallback;
			fail(RasterErrc::MalformedHeader, "missing required tag " + std::to_string(id));
		}
		return numbers(r, *e)[0];
	};

	RasterGrid g;
	g.width = static_cast<std::size_t>(scalar(tag::ImageWidth));
	g.height = static_cast<std::size_t>(scalar(tag::ImageLength));
	if (g.width == 0 || g.height == 0)
		fail(RasterErrc::MalformedHeader, "zero image dimension");

	if (scalar(tag::SamplesPerPixel, 1.0) != 1.0)
		fail(RasterErrc::UnsupportedLayout, "only single-band rasters are supported");
	const int compression = static_cast<int>(scalar(tag::Compression, 1.0));
	if (compression != 1 && compression != 8 && compression != 32946)
		fail(RasterErrc::UnsupportedCompression, "compression code " + std::to_string(compression));
	const int predictor = static_cast<int>(scalar(tag::Predictor, 1.0));
	if (predictor != 1 && predictor != 2)
		fail(RasterErrc::UnsupportedCompression, "predictor " + std::to_string(predictor));

	const int bits = static_cast<int>(scalar(tag::BitsPerSample, 1.0));
	const int format = static_cast<int>(scalar(tag::SampleFormat, 1.0));
	SampleType st;
	if (format == 3 && bits == 32)
		st = SampleType::Float32;
	else if (format == 3 && bits == 64)
		st = SampleType::Float64;
	else if (format == 2 && bits == 16)
		st = SampleType::Int16;
	else if (format == 1 && bits == 8)
		st = SampleType::UInt8;
	else
		fail(RasterErrc::UnsupportedLayout, "sample format " + std::to_string(format) + " with " + std::to_string(bits) + " bits");
	const std::size_t bps = bytes_per_sample(st);

	// Georeferencing.
	if (get(tag::ModelTransformation))
		fail(RasterErrc::UnsupportedLayout, "ModelTransformation (rotated grids) is not supported");
	const Entry* scale_e = get(tag::ModelPixelScale);
	const Entry* tie_e = get(tag::ModelTiepoint);
	if (!scale_e || !tie_e || scale_e->count < 2 || tie_e->count < 6)
		fail(RasterErrc::MalformedHeader, "missing ModelPixelScale/ModelTiepoint");
	const auto scale = numbers(r, *scale_e);
	const auto tie = numbers(r, *tie_e);
	if (!(scale[0] > 0.0) || !(scale[1] > 0.0))
		fail(RasterErrc::MalformedHeader, "non-positive pixel scale");

	const Entry* keys_e = get(tag::GeoKeyDirectory);
	if (!keys_e || keys_e->count < 4)
		fail(RasterErrc::UnsupportedCrs, "missing GeoKeyDirectory");
	const auto keys = numbers(r, *keys_e);
	std::map<int, double> geokeys;
	const std::size_t n_keys = static_cast<std::size_t>(keys[3]);
	for (std::size_t i = 0; i < n_keys && 4 + 4 * i + 3 < keys.size(); ++i) {
		const std::size_t k = 4 + 4 * i;
		if (keys[k + 1] == 0) // value stored inline
			geokeys[static_cast<int>(keys[k])] = keys[k + 3];
	}
	if (geokeys[geokey::ModelType] != 2)
		fail(RasterErrc::UnsupportedCrs, "model type is not geographic");
	if (geokeys[geokey::GeographicType] != RasterGrid::kEpsg)
		fail(RasterErrc::UnsupportedCrs, "geographic CRS is not EPSG:4326");

	g.transform.pixel_width = scale[0];
	g.transform.pixel_height = scale[1];
	g.transform.origin_lon = tie[3] - tie[0] * scale[0];
	g.transform.origin_lat = tie[4] + tie[1] * scale[1];
	if (geokeys.count(geokey::RasterType) && geokeys[geokey::RasterType] == 2) {
		// PixelIsPoint: the tiepoint names a pixel center.
		g.transform.origin_lon -= 0.5 * scale[0];
		g.transform.origin_lat += 0.5 * scale[1];
	}

	if (const Entry* nd = get(tag::GdalNodata)) {
		const std::string text = ascii(r, *nd);
		char* stop = nullptr;
		const double v = std::strtod(text.c_str(), &stop);
		if (stop == text.c_str())
			fail(RasterErrc::MalformedHeader, "unparseable GDAL_NODATA '" + text + "'");
		g.nodata = v;
	}
	std::optional<double> value_scale, value_offset;
	if (const Entry* md = get(tag::GdalMetadata)) {
		const std::string xml = ascii(r, *md);
		value_scale = metadata_item(xml, "scale");
		value_offset = metadata_item(xml, "offset");
	}

	// Chunk geometry.
	std::size_t chunk_w, chunk_h, chunks_across, chunks_down;
	const Entry *offsets_e, *counts_e;
	const bool tiled = get(tag::TileWidth) != nullptr;
	if (tiled) {
		chunk_w = static_cast<std::size_t>(scalar(tag::TileWidth));
		chunk_h = static_cast<std::size_t>(scalar(tag::TileLength));
		offsets_e = get(tag::TileOffsets);
		counts_e = get(tag::TileByteCounts);
	} else {
		chunk_w = g.width;
		chunk_h = static_cast<std::size_t>(std::min<double>(scalar(tag::RowsPerStrip, double(g.height)), double(g.height)));
		offsets_e = get(tag::StripOffsets);
		counts_e = get(tag::StripByteCounts);
	}
	if (chunk_w == 0 || chunk_h == 0)
		fail(RasterErrc::MalformedHeader, "zero chunk dimension");
	chunks_across = (g.width + chunk_w - 1) / chunk_w;
	chunks_down = (g.height + chunk_h - 1) / chunk_h;
	if (!offsets_e || !counts_e)
		fail(RasterErrc::MalformedHeader, "missing data offsets/byte counts");
	const auto offsets = numbers(r, *offsets_e);
	const auto counts = numbers(r, *counts_e);
	if (offsets.size() < chunks_across * chunks_down || counts.size() < offsets.size())
		fail(RasterErrc::MalformedHeader, "too few data chunks");

	g.values.assign(g.width * g.height, 0.0);
	for (std::size_t cy = 0; cy < chunks_down; ++cy) {
		for (std::size_t cx = 0; cx < chunks_across; ++cx) {
			const std::size_t idx = cy * chunks_across + cx;
			// Strips at the bottom may be short; tiles are always full size.
			const std::size_t rows = tiled ? chunk_h : std::min(chunk_h, g.height - cy * chunk_h);
			const std::size_t expected = chunk_w * rows * bps;
			const auto raw = r.slice(static_cast<std::size_t>(offsets[idx]), static_cast<std::size_t>(counts[idx]), RasterErrc::TruncatedData);
			Bytes chunk;
			if (compression == 1) {
				if (raw.size() < expected)
					fail(RasterErrc::TruncatedData, "chunk " + std::to_string(idx) + " is short");
				chunk.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(expected));
			} else {
				chunk = inflate_block(raw, expected);
			}
			if (predictor == 2)
				undo_predictor(chunk, chunk_w, rows, st, big);
			for (std::size_t y = 0; y < rows; ++y) {
				const std::size_t row = cy * chunk_h + y;
				if (row >= g.height)
					break;
				for (std::size_t x = 0; x < chunk_w; ++x) {
					const std::size_t col = cx * chunk_w + x;
					if (col >= g.width)
						break;
					g.at(col, row) = decode_sample(chunk.data() + (y * chunk_w + x) * bps, st, big);
				}
			}
		}
	}

	for (double& v : g.values) {
		if (g.is_nodata(v))
			continue;
		if (value_scale)
			v *= *value_scale;
		if (value_offset)
			v += *value_offset;
	}
	g.validate();
	return g;
}

namespace {

class Writer
{
public:
	explicit Writer(bool big) : big_(big) {}

	template<typename T>
	void put(Bytes& out, T v) const
	{
		if (big_ != (std::endian::native == std::endian::big))
			v = Reader::byteswap(v);
		const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
		out.insert(out.end(), p, p + sizeof(T));
	}

	template<typename T>
	void put_at(Bytes& out, std::size_t off, T v) const
	{
		if (big_ != (std::endian::native == std::endian::big))
			v = Reader::byteswap(v);
		std::memcpy(out.data() + off, &v, sizeof(T));
	}

private:
	bool big_;
};

struct OutTag
{
	std::uint16_t id;
	std::uint16_t type;
	std::uint32_t count;
	Bytes data; // already in file byte order
};

} // namespace

Bytes write_geotiff(const RasterGrid& grid, const WriteOptions& options)
{
	grid.validate();
	const bool big = options.byte_order == ByteOrder::Big;
	const Writer w(big);
	const SampleType st = options.sample_type;
	const std::size_t bps = bytes_per_sample(st);
	const bool integer = st == SampleType::Int16 || st == SampleType::UInt8;
	if (options.predictor && !integer)
		throw Error("geotiff: predictor requires an integer sample type");
	if (options.tile_size % 16 != 0)
		throw Error("geotiff: tile size must be a multiple of 16");

	auto encode_value = [&](double v, Bytes& out) {
		if (!grid.is_nodata(v)) {
			if (options.offset)
				v -= *options.offset;
			if (options.scale)
				v /= *options.scale;
		}
		switch (st) {
		case SampleType::Float32: w.put(out, static_cast<float>(v)); break;
		case SampleType::Float64: w.put(out, v); break;
		case SampleType::Int16: w.put(out, static_cast<std::int16_t>(std::clamp(std::llround(v), -32768LL, 32767LL))); break;
		case SampleType::UInt8: out.push_back(static_cast<std::uint8_t>(std::clamp(std::llround(v), 0LL, 255LL))); break;
		}
	};

	const bool tiled = options.tile_size > 0;
	const std::size_t chunk_w = tiled ? options.tile_size : grid.width;
	const std::size_t chunk_h = tiled ? options.tile_size
	                                  : (options.rows_per_strip ? std::min(options.rows_per_strip, grid.height) : grid.height);
	const std::size_t across = (grid.width + chunk_w - 1) / chunk_w;
	const std::size_t down = (grid.height + chunk_h - 1) / chunk_h;

	std::vector<Bytes> chunks;
	for (std::size_t cy = 0; cy < down; ++cy) {
		for (std::size_t cx = 0; cx < across; ++cx) {
			const std::size_t rows = tiled ? chunk_h : std::min(chunk_h, grid.height - cy * chunk_h);
			Bytes chunk;
			chunk.reserve(chunk_w * rows * bps);
			for (std::size_t y = 0; y < rows; ++y) {
				for (std::size_t x = 0; x < chunk_w; ++x) {
					const std::size_t row = cy * chunk_h + y, col = cx * chunk_w + x;
					const double v = (row < grid.height && col < grid.width) ? grid.at(col, row) : 0.0;
					encode_value(v, chunk);
				}
			}
			if (options.predictor) {
				// Forward differencing, right to left so each sample uses the original neighbour.
				for (std::size_t y = 0; y < rows; ++y) {
					for (std::size_t x = chunk_w; x-- > 1;) {
						if (st == SampleType::UInt8) {
							auto* p = chunk.data() + y * chunk_w;
							p[x] = static_cast<std::uint8_t>(p[x] - p[x - 1]);
						} else {
							auto* p = chunk.data() + y * chunk_w * 2;
							const bool swap = big != (std::endian::native == std::endian::big);
							std::uint16_t cur, prev;
							std::memcpy(&cur, p + 2 * x, 2);
							std::memcpy(&prev, p + 2 * (x - 1), 2);
							if (swap) {
								cur = Reader::byteswap(cur);
								prev = Reader::byteswap(prev);
							}
							std::uint16_t diff = static_cast<std::uint16_t>(cur - prev);
							if (swap)
								diff = Reader::byteswap(diff);
							std::memcpy(p + 2 * x, &diff, 2);
						}
					}
				}
			}
			if (options.compression == Compression::Deflate)
				chunk = deflate_block(chunk);
			chunks.push_back(std::move(chunk));
		}
	}

	std::vector<OutTag> tags;
	auto add_shorts = [&](std::uint16_t id, std::initializer_list<std::uint16_t> vs) {
		OutTag t{id, kShort, static_cast<std::uint32_t>(vs.size()), {}};
		for (auto v : vs)
			w.put(t.data, v);
		tags.push_back(std::move(t));
	};
	auto add_longs = [&](std::uint16_t id, const std::vector<std::uint32_t>& vs) {
		OutTag t{id, kLong, static_cast<std::uint32_t>(vs.size()), {}};
		for (auto v : vs)
			w.put(t.data, v);
		tags.push_back(std::move(t));
	};
	auto add_doubles = [&](std::uint16_t id, std::initializer_list<double> vs) {
		OutTag t{id, kDouble, static_cast<std::uint32_t>(vs.size()), {}};
		for (auto v : vs)
			w.put(t.data, v);
		tags.push_back(std::move(t));
	};
	auto add_ascii = [&](std::uint16_t id, const std::string& s) {
		OutTag t{id, kAscii, static_cast<std::uint32_t>(s.size() + 1), Bytes(s.begin(), s.end())};
		t.data.push_back(0);
		tags.push_back(std::move(t));
	};

	const std::uint16_t format = st == SampleType::Float32 || st == SampleType::Float64 ? 3 : (st == SampleType::Int16 ? 2 : 1);
	add_longs(tag::ImageWidth, {static_cast<std::uint32_t>(grid.width)});
	add_longs(tag::ImageLength, {static_cast<std::uint32_t>(grid.height)});
	add_shorts(tag::BitsPerSample, {static_cast<std::uint16_t>(bps * 8)});
	add_shorts(tag::Compression, {static_cast<std::uint16_t>(options.compression == Compression::Deflate ? 8 : 1)});
	add_shorts(tag::Photometric, {1});
	// Offsets are patched below once the layout is known.
	std::vector<std::uint32_t> counts;
	for (const auto& c : chunks)
		counts.push_back(static_cast<std::uint32_t>(c.size()));
	const std::vector<std::uint32_t> zero_offsets(chunks.size(), 0);
	if (!tiled)
		add_longs(tag::StripOffsets, zero_offsets);
	add_shorts(tag::SamplesPerPixel, {1});
	if (!tiled) {
		add_longs(tag::RowsPerStrip, {static_cast<std::uint32_t>(chunk_h)});
		add_longs(tag::StripByteCounts, counts);
	}
	add_shorts(tag::PlanarConfig, {1});
	if (options.predictor)
		add_shorts(tag::Predictor, {2});
	if (tiled) {
		add_longs(tag::TileWidth, {static_cast<std::uint32_t>(chunk_w)});
		add_longs(tag::TileLength, {static_cast<std::uint32_t>(chunk_h)});
		add_longs(tag::TileOffsets, zero_offsets);
		add_longs(tag::TileByteCounts, counts);
	}
	add_shorts(tag::SampleFormat, {format});
	add_doubles(tag::ModelPixelScale, {grid.transform.pixel_width, grid.transform.pixel_height, 0.0});
	add_doubles(tag::ModelTiepoint, {0.0, 0.0, 0.0, grid.transform.origin_lon, grid.transform.origin_lat, 0.0});
	add_shorts(tag::GeoKeyDirectory, {1, 1, 0, 3,
	                                  geokey::ModelType, 0, 1, 2,
	                                  geokey::RasterType, 0, 1, 1,
	                                  geokey::GeographicType, 0, 1, RasterGrid::kEpsg});
	if (options.scale || options.offset) {
		std::string xml = "<GDALMetadata>\n";
		if (options.offset)
			xml += "  <Item name=\"OFFSET\" sample=\"0\" role=\"offset\">" + format_double(*options.offset) + "</Item>\n";
		if (options.scale)
			xml += "  <Item name=\"SCALE\" sample=\"0\" role=\"scale\">" + format_double(*options.scale) + "</Item>\n";
		xml += "</GDALMetadata>";
		add_ascii(tag::GdalMetadata, xml);
	}
	if (grid.nodata)
		add_ascii(tag::GdalNodata, format_double(*grid.nodata));

	std::sort(tags.begin(), tags.end(), [](const OutTag& a, const OutTag& b) { return a.id < b.id; });

	// Layout: header, IFD, out-of-line tag data, pixel chunks.
	const std::size_t ifd_offset = 8;
	const std::size_t ifd_size = 2 + 12 * tags.size() + 4;
	std::size_t cursor = ifd_offset + ifd_size;
	std::vector<std::size_t> tag_data_offset(tags.size(), 0);
	for (std::size_t i = 0; i < tags.size(); ++i) {
		if (tags[i].data.size() > 4) {
			cursor += cursor & 1;
			tag_data_offset[i] = cursor;
			cursor += tags[i].data.size();
		}
	}
	std::vector<std::uint32_t> chunk_offsets;
	for (const auto& c : chunks) {
		cursor += cursor & 1;
		chunk_offsets.push_back(static_cast<std::uint32_t>(cursor));
		cursor += c.size();
	}
	for (auto& t : tags) {
		if (t.id == tag::StripOffsets || t.id == tag::TileOffsets) {
			t.data.clear();
			for (auto o : chunk_offsets)
				w.put(t.data, o);
		}
	}

	Bytes out;
	out.reserve(cursor);
	out.push_back(big ? 'M' : 'I');
	out.push_back(big ? 'M' : 'I');
	w.put(out, std::uint16_t{42});
	w.put(out, static_cast<std::uint32_t>(ifd_offset));
	w.put(out, static_cast<std::uint16_t>(tags.size()));
	for (std::size_t i = 0; i < tags.size(); ++i) {
		const auto& t = tags[i];
		w.put(out, t.id);
		w.put(out, t.type);
		w.put(out, t.count);
		if (t.data.size() <= 4) {
			Bytes inl = t.data;
			inl.resize(4, 0);
			out.insert(out.end(), inl.begin(), inl.end());
		} else {
			w.put(out, static_cast<std::uint32_t>(tag_data_offset[i]));
		}
	}
	w.put(out, std::uint32_t{0});
	for (std::size_t i = 0; i < tags.size(); ++i) {
		if (tags[i].data.size() > 4) {
			out.resize(tag_data_offset[i], 0);
			out.insert(out.end(), tags[i].data.begin(), tags[i].data.end());
		}
	}
	for (std::size_t i = 0; i < chunks.size(); ++i) {
		out.resize(chunk_offsets[i], 0);
		out.insert(out.end(), chunks[i].begin(), chunks[i].end());
	}
	return out;
}

RasterGrid load_geotiff(const std::filesystem::path& path)
{
	const Bytes bytes = read_file(path);
	return parse_geotiff(bytes);
}

void save_geotiff(const std::filesystem::path& path, const RasterGrid& grid, const WriteOptions& options)
{
	write_file_atomic(path, write_geotiff(grid, options));
}

} // namespace terrapov::raster
