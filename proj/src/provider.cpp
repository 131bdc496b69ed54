#include "terrapov/tiles.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <future>

namespace terrapov::tiles {

namespace {

std::string micro_degrees(double v)
{
	return std::to_string(std::llround(v * 1e6));
}

std::string six_decimals(double v)
{
	char buf[64];
	std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(std::llround(v * 1e6)) / 1e6);
	return buf;
}

void replace_all(std::string& s, const std::string& from, const std::string& to)
{
	for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
		s.replace(pos, from.size(), to);
}

std::string default_id(const ProviderConfig& c)
{
	switch (c.kind) {
	case ProviderKind::Synthetic: return "synthetic-" + std::to_string(c.seed);
	case ProviderKind::CacheOnly: return "cache";
	case ProviderKind::HttpTemplate: return "http-" + sha256_hex(c.url_template).substr(0, 12);
	}
	return "provider";
}

} // namespace

bool offline_mode()
{
	const char* v = std::getenv("TERRAPOV_OFFLINE");
	return v && std::string(v) == "1";
}

std::string cache_key(const std::string& provider_id, const TileSpec& spec)
{
	return provider_id + "_" + micro_degrees(spec.lat) + "_" + micro_degrees(spec.lon) + "_z" + std::to_string(spec.zoom) +
	       "_" + std::to_string(spec.width) + "x" + std::to_string(spec.height);
}

std::string expand_url(const std::string& url_template, const TileSpec& spec)
{
	std::string url = url_template;
	replace_all(url, "{lat}", six_decimals(spec.lat));
	replace_all(url, "{lon}", six_decimals(spec.lon));
	replace_all(url, "{zoom}", std::to_string(spec.zoom));
	replace_all(url, "{w}", std::to_string(spec.width));
	replace_all(url, "{h}", std::to_string(spec.height));
	return url;
}

TileFetcher::TileFetcher(ProviderConfig config)
	: config_(std::move(config))
{
	provider_id_ = config_.provider_id.empty() ? default_id(config_) : config_.provider_id;
	if (config_.kind != ProviderKind::Synthetic && config_.cache_dir.empty())
		throw TileError(TileErrc::InvalidSpec, "provider '" + provider_id_ + "' requires a cache directory");
	if (config_.kind == ProviderKind::Synthetic && !config_.latent)
		throw TileError(TileErrc::InvalidSpec, "synthetic provider requires a latent source");
	if (config_.kind == ProviderKind::HttpTemplate && config_.url_template.rfind("http://", 0) != 0)
		throw TileError(TileErrc::InvalidSpec, "http provider supports plain http:// templates only");
	if (config_.max_in_flight < 1)
		config_.max_in_flight = 1;
}

std::mutex& TileFetcher::key_mutex(const std::string& key)
{
	std::lock_guard lock(map_mutex_);
	auto& m = key_mutexes_[key];
	if (!m)
		m = std::make_unique<std::mutex>();
	return *m;
}

std::optional<Tile> TileFetcher::cache_lookup(const std::string& key, const TileSpec& spec) const
{
	if (config_.cache_dir.empty())
		return std::nullopt;
	const auto stem = config_.cache_dir / key;
	auto ppm = stem;
	ppm += ".ppm";
	if (!std::filesystem::exists(ppm))
		return std::nullopt;
	Tile t = decode_ppm(read_file(ppm));
	if (t.spec.width != spec.width || t.spec.height != spec.height)
		throw TileError(TileErrc::DecodeFailed, "cached tile " + ppm.string() + " has unexpected size");
	t.spec = spec;
	return t;
}

void TileFetcher::cache_store(const std::string& key, const Tile& tile) const
{
	if (config_.cache_dir.empty())
		return;
	save_tile(config_.cache_dir / key, tile);
}

Tile TileFetcher::fetch_upstream(const TileSpec& spec)
{
	switch (config_.kind) {
	case ProviderKind::Synthetic: {
		++upstream_;
		return generate_synthetic(spec, config_.latent(spec), config_.seed, config_.style);
	}
	case ProviderKind::CacheOnly: break;
	case ProviderKind::HttpTemplate: {
		const std::string url = expand_url(config_.url_template, spec);
		const auto slash = url.find('/', 7);
		const std::string origin = url.substr(0, slash);
		const std::string path = slash == std::string::npos ? "/" : url.substr(slash);
		httplib::Client client(origin);
		client.set_connection_timeout(config_.timeout_seconds);
		client.set_read_timeout(config_.timeout_seconds);
		++upstream_;
		const auto res = client.Get(path);
		if (!res)
			throw TileError(TileErrc::FetchFailed, "GET " + url + " failed: " + httplib::to_string(res.error()));
		if (res->status < 200 || res->status >= 300)
			throw TileError(TileErrc::FetchFailed, "GET " + url + " returned HTTP " + std::to_string(res->status));
		const auto* data = reinterpret_cast<const std::uint8_t*>(res->body.data());
		Tile t = decode_ppm(std::span(data, res->body.size()));
		if (t.spec.width != spec.width || t.spec.height != spec.height)
			throw TileError(TileErrc::DecodeFailed, "GET " + url + " returned a " + std::to_string(t.spec.width) + "x" +
			                                            std::to_string(t.spec.height) + " image");
		t.spec = spec;
		return t;
	}
	}
	throw TileError(TileErrc::CacheMiss, "no cached tile for " + spec.cluster_id + "#" + std::to_string(spec.tile_index));
}

Tile TileFetcher::fetch(const TileSpec& spec)
{
	validate(spec);
	const std::string key = cache_key(provider_id_, spec);
	std::lock_guard lock(key_mutex(key));
	if (auto hit = cache_lookup(key, spec)) {
		++hits_;
		return *hit;
	}
	if (config_.kind == ProviderKind::HttpTemplate && offline_mode())
		throw TileError(TileErrc::CacheMiss, "offline mode: no cached tile for key " + key);
	Tile t = fetch_upstream(spec);
	cache_store(key, t);
	return t;
}

std::vector<Tile> TileFetcher::fetch_all(const std::vector<TileSpec>& specs)
{
	std::vector<Tile> out(specs.size());
	const std::size_t width = static_cast<std::size_t>(config_.max_in_flight);
	for (std::size_t start = 0; start < specs.size(); start += width) {
		const std::size_t end = std::min(specs.size(), start + width);
		std::vector<std::future<Tile>> pending;
		for (std::size_t i = start; i < end; ++i)
			pending.push_back(std::async(std::launch::async, [this, &specs, i] { return fetch(specs[i]); }));
		for (std::size_t i = start; i < end; ++i)
			out[i] = pending[i - start].get();
	}
	return out;
}

Tile fetch_tile(const ProviderConfig& provider, const TileSpec& spec)
{
	TileFetcher f(provider);
	return f.fetch(spec);
}

} // namespace terrapov::tiles
