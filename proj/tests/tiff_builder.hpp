#pragma once

// Minimal independent TIFF encoder used as a test oracle. Lays files out
// differently from the library writer: image data first, IFD last.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace testutil {

class TiffBuilder
{
public:
	explicit TiffBuilder(bool big_endian = false) : big_(big_endian) {}

	enum : std::uint16_t
	{
		Byte = 1,
		Ascii = 2,
		Short = 3,
		Long = 4,
		Double = 12,
	};

	template<typename T>
	void put(std::vector<std::uint8_t>& out, T v) const
	{
		std::uint8_t b[sizeof(T)];
		std::memcpy(b, &v, sizeof(T));
		if (big_ != (std::endian::native == std::endian::big))
			std::reverse(b, b + sizeof(T));
		out.insert(out.end(), b, b + sizeof(T));
	}

	void shorts(std::uint16_t id, const std::vector<std::uint16_t>& v)
	{
		Field f{id, Short, static_cast<std::uint32_t>(v.size()), {}};
		for (auto x : v)
			put(f.data, x);
		set(f);
	}
	void longs(std::uint16_t id, const std::vector<std::uint32_t>& v)
	{
		Field f{id, Long, static_cast<std::uint32_t>(v.size()), {}};
		for (auto x : v)
			put(f.data, x);
		set(f);
	}
	void doubles(std::uint16_t id, const std::vector<double>& v)
	{
		Field f{id, Double, static_cast<std::uint32_t>(v.size()), {}};
		for (auto x : v)
			put(f.data, x);
		set(f);
	}
	void ascii(std::uint16_t id, const std::string& s)
	{
		Field f{id, Ascii, static_cast<std::uint32_t>(s.size() + 1), {}};
		f.data.assign(s.begin(), s.end());
		f.data.push_back(0);
		set(f);
	}
	void remove(std::uint16_t id)
	{
		fields_.erase(std::remove_if(fields_.begin(), fields_.end(), [&](const Field& f) { return f.id == id; }),
		              fields_.end());
	}

	/// Image data chunks; their offsets/counts are written into the given tags.
	void chunks(std::vector<std::vector<std::uint8_t>> c, std::uint16_t offsets_tag = 273, std::uint16_t counts_tag = 279)
	{
		chunks_ = std::move(c);
		offsets_tag_ = offsets_tag;
		counts_tag_ = counts_tag;
	}

	/// Standard geographic georeferencing: tiepoint at the upper-left corner.
	void georef(double west, double north, double px, double py, std::uint16_t epsg = 4326, std::uint16_t model = 2)
	{
		doubles(33550, {px, py, 0.0});
		doubles(33922, {0, 0, 0, west, north, 0});
		shorts(34735, {1, 1, 0, 3, 1024, 0, 1, model, 1025, 0, 1, 1, 2048, 0, 1, epsg});
	}

	/// Added to every recorded chunk byte count, to forge overlong chunks.
	std::uint32_t count_bias = 0;

	std::vector<std::uint8_t> build()
	{
		std::vector<std::uint8_t> out;
		out.push_back(big_ ? 'M' : 'I');
		out.push_back(big_ ? 'M' : 'I');
		put<std::uint16_t>(out, 42);
		put<std::uint32_t>(out, 0); // patched below
		std::vector<std::uint32_t> offsets, counts;
		for (const auto& c : chunks_) {
			offsets.push_back(static_cast<std::uint32_t>(out.size()));
			counts.push_back(static_cast<std::uint32_t>(c.size()) + count_bias);
			out.insert(out.end(), c.begin(), c.end());
		}
		if (!chunks_.empty()) {
			longs(offsets_tag_, offsets);
			longs(counts_tag_, counts);
		}
		std::sort(fields_.begin(), fields_.end(), [](const Field& a, const Field& b) { return a.id < b.id; });

		// Out-of-line values.
		std::vector<std::uint32_t> where(fields_.size(), 0);
		for (std::size_t i = 0; i < fields_.size(); ++i) {
			if (fields_[i].data.size() <= 4)
				continue;
			if (out.size() % 2)
				out.push_back(0);
			where[i] = static_cast<std::uint32_t>(out.size());
			out.insert(out.end(), fields_[i].data.begin(), fields_[i].data.end());
		}
		if (out.size() % 2)
			out.push_back(0);
		const auto ifd = static_cast<std::uint32_t>(out.size());
		put<std::uint16_t>(out, static_cast<std::uint16_t>(fields_.size()));
		for (std::size_t i = 0; i < fields_.size(); ++i) {
			const auto& f = fields_[i];
			put(out, f.id);
			put(out, f.type);
			put(out, f.count);
			if (f.data.size() <= 4) {
				auto d = f.data;
				d.resize(4, 0);
				out.insert(out.end(), d.begin(), d.end());
			} else {
				put(out, where[i]);
			}
		}
		put<std::uint32_t>(out, 0);
		std::vector<std::uint8_t> ifd_bytes;
		put(ifd_bytes, ifd);
		std::copy(ifd_bytes.begin(), ifd_bytes.end(), out.begin() + 4);
		return out;
	}

private:
	struct Field
	{
		std::uint16_t id;
		std::uint16_t type;
		std::uint32_t count;
		std::vector<std::uint8_t> data;
	};

	void set(const Field& f)
	{
		remove(f.id);
		fields_.push_back(f);
	}

	bool big_;
	std::vector<Field> fields_;
	std::vector<std::vector<std::uint8_t>> chunks_;
	std::uint16_t offsets_tag_ = 273, counts_tag_ = 279;
};

/// A single-strip float32 image with geographic georeferencing.
inline TiffBuilder float_strip(bool big, std::uint32_t w, std::uint32_t h, const std::vector<float>& values, double west,
                               double north, double px)
{
	TiffBuilder b(big);
	b.longs(256, {w});
	b.longs(257, {h});
	b.shorts(258, {32});
	b.shorts(259, {1});
	b.shorts(262, {1});
	b.shorts(277, {1});
	b.longs(278, {h});
	b.shorts(339, {3});
	b.georef(west, north, px, px);
	std::vector<std::uint8_t> data;
	for (float v : values)
		b.put(data, v);
	b.chunks({data});
	return b;
}

} // namespace testutil
