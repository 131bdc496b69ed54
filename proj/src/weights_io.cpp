// TPW1 layout (all integers and floats little-endian):
//   "TPW1" | 32-byte SHA-256 of the network config | u64 init seed |
//   u32 layer count | per layer: u64 n, n x f32 weights, u64 m, m x f32 biases
// Layers are the conv stack followed by the three dense layers.

#include "terrapov/convnet.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace terrapov::convnet {

namespace {

template<typename T>
void put_le(Bytes& out, T v)
{
	if constexpr (std::endian::native == std::endian::big) {
		std::uint8_t buf[sizeof(T)];
		std::memcpy(buf, &v, sizeof(T));
		for (std::size_t i = sizeof(T); i-- > 0;)
			out.push_back(buf[i]);
	} else {
		const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
		out.insert(out.end(), p, p + sizeof(T));
	}
}

class LeReader
{
public:
	explicit LeReader(std::span<const std::uint8_t> b) : bytes_(b) {}

	template<typename T>
	T get()
	{
		if (bytes_.size() - pos_ < sizeof(T))
			throw ConvnetError(ConvnetErrc::Truncated, "load_weights: stream truncated at byte " + std::to_string(pos_));
		std::uint8_t buf[sizeof(T)];
		std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
		if constexpr (std::endian::native == std::endian::big)
			std::reverse(buf, buf + sizeof(T));
		pos_ += sizeof(T);
		T v;
		std::memcpy(&v, buf, sizeof(T));
		return v;
	}

	std::span<const std::uint8_t> take(std::size_t n)
	{
		if (bytes_.size() - pos_ < n)
			throw ConvnetError(ConvnetErrc::Truncated, "load_weights: stream truncated at byte " + std::to_string(pos_));
		auto s = bytes_.subspan(pos_, n);
		pos_ += n;
		return s;
	}

	bool done() const { return pos_ == bytes_.size(); }

private:
	std::span<const std::uint8_t> bytes_;
	std::size_t pos_ = 0;
};

Bytes digest_bytes(const NetworkConfig& c)
{
	const std::string hex = c.digest();
	Bytes out;
	for (std::size_t i = 0; i < hex.size(); i += 2)
		out.push_back(static_cast<std::uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
	return out;
}

template<typename M>
void put_array(Bytes& out, const M& m)
{
	put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.size()));
	// Column-major element order, as Eigen stores it.
	for (Eigen::Index i = 0; i < m.size(); ++i)
		put_le<float>(out, m.data()[i]);
}

template<typename M>
void get_array(LeReader& r, M& m, const char* what)
{
	const auto n = r.get<std::uint64_t>();
	if (n != static_cast<std::uint64_t>(m.size()))
		throw ConvnetError(ConvnetErrc::ConfigMismatch, std::string("load_weights: ") + what + " has " + std::to_string(n) +
		                                                    " values, expected " + std::to_string(m.size()));
	for (Eigen::Index i = 0; i < m.size(); ++i)
		m.data()[i] = r.get<float>();
}

} // namespace

Bytes save_weights(const ModelWeights<float>& w)
{
	Bytes out = {'T', 'P', 'W', '1'};
	const Bytes d = digest_bytes(w.config);
	out.insert(out.end(), d.begin(), d.end());
	put_le<std::uint64_t>(out, w.init_seed);
	put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.conv.size() + w.dense.size()));
	for (const auto& c : w.conv) {
		put_array(out, c.kernel);
		put_array(out, c.bias);
	}
	for (const auto& l : w.dense) {
		put_array(out, l.weight);
		put_array(out, l.bias);
	}
	return out;
}

ModelWeights<float> load_weights(std::span<const std::uint8_t> bytes, const NetworkConfig& expected)
{
	LeReader r(bytes);
	const auto magic = r.take(std::min<std::size_t>(4, bytes.size()));
	if (magic.size() < 4 || std::memcmp(magic.data(), "TPW1", 4) != 0)
		throw ConvnetError(ConvnetErrc::BadMagic, "load_weights: missing TPW1 magic");
	const auto digest = r.take(32);
	const Bytes want = digest_bytes(expected);
	if (!std::equal(digest.begin(), digest.end(), want.begin()))
		throw ConvnetError(ConvnetErrc::ConfigMismatch, "load_weights: weights were saved for a different network config");

	ModelWeights<float> w = zero_network<float>(expected);
	w.init_seed = r.get<std::uint64_t>();
	const auto layers = r.get<std::uint32_t>();
	if (layers != w.conv.size() + w.dense.size())
		throw ConvnetError(ConvnetErrc::ConfigMismatch, "load_weights: layer count " + std::to_string(layers));
	for (auto& c : w.conv) {
		get_array(r, c.kernel, "conv kernel");
		get_array(r, c.bias, "conv bias");
	}
	for (auto& l : w.dense) {
		get_array(r, l.weight, "dense weight");
		get_array(r, l.bias, "dense bias");
	}
	if (!r.done())
		throw ConvnetError(ConvnetErrc::ConfigMismatch, "load_weights: trailing bytes after last layer");
	if (!w.all_finite())
		throw ConvnetError(ConvnetErrc::ConfigMismatch, "load_weights: non-finite parameter");
	return w;
}

} // namespace terrapov::convnet
