#include "terrapov/survey.hpp"

#include "terrapov/csv.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

namespace terrapov::survey {

double parse_number(std::string_view field, const std::string& what)
{
	double v = 0.0;
	const auto* end = field.data() + field.size();
	const auto [ptr, ec] = std::from_chars(field.data(), end, v);
	if (field.empty() || ec != std::errc() || ptr != end || !std::isfinite(v))
		throw SurveyError(SurveyErrc::BadValue, what + ": '" + std::string(field) + "' is not a finite number");
	return v;
}

std::vector<HouseholdRow> load_households(std::string_view csv_text)
{
	const auto table = csv::parse(csv_text);
	if (table.header.empty())
		throw SurveyError(SurveyErrc::EmptyFile, "households: file is empty");

	static constexpr std::string_view required[] = {"household_id", "cluster_id", "lat", "lon", "annual_consumption",
	                                                "household_size"};
	long col[6];
	for (std::size_t i = 0; i < 6; ++i) {
		col[i] = table.column(required[i]);
		if (col[i] < 0)
			throw SurveyError(SurveyErrc::MissingColumn, "households: missing column '" + std::string(required[i]) + "'");
	}
	if (table.rows.empty())
		throw SurveyError(SurveyErrc::EmptyFile, "households: no data rows");

	std::vector<HouseholdRow> out;
	out.reserve(table.rows.size());
	for (std::size_t r = 0; r < table.rows.size(); ++r) {
		const auto& f = table.rows[r];
		const std::string where = "households line " + std::to_string(table.lines[r]);
		if (f.size() < table.header.size())
			throw SurveyError(SurveyErrc::BadValue, where + ": expected " + std::to_string(table.header.size()) + " fields");
		HouseholdRow row;
		row.household_id = f[col[0]];
		row.cluster_id = f[col[1]];
		if (row.household_id.empty() || row.cluster_id.empty())
			throw SurveyError(SurveyErrc::BadValue, where + ": empty identifier");
		row.lat = parse_number(f[col[2]], where + " lat");
		row.lon = parse_number(f[col[3]], where + " lon");
		row.annual_consumption = parse_number(f[col[4]], where + " annual_consumption");
		const double size = parse_number(f[col[5]], where + " household_size");
		if (!(row.lat >= -90.0 && row.lat <= 90.0) || !(row.lon >= -180.0 && row.lon <= 180.0))
			throw SurveyError(SurveyErrc::BadValue, where + ": coordinate out of range");
		if (!std::isfinite(row.annual_consumption) || row.annual_consumption < 0.0)
			throw SurveyError(SurveyErrc::BadValue, where + ": annual_consumption must be a non-negative number");
		if (!(size >= 1.0) || size != std::floor(size) || size > 1e6)
			throw SurveyError(SurveyErrc::BadValue, where + ": household_size must be an integer >= 1");
		row.household_size = static_cast<int>(size);
		out.push_back(std::move(row));
	}
	return out;
}

std::vector<ClusterRecord> aggregate_clusters(std::span<const HouseholdRow> rows)
{
	// Canonical member order makes the floating-point sums independent of input order.
	std::vector<const HouseholdRow*> sorted;
	sorted.reserve(rows.size());
	for (const auto& r : rows)
		sorted.push_back(&r);
	std::sort(sorted.begin(), sorted.end(), [](const HouseholdRow* a, const HouseholdRow* b) {
		return std::tie(a->cluster_id, a->household_id, a->lat, a->lon, a->annual_consumption, a->household_size) <
		       std::tie(b->cluster_id, b->household_id, b->lat, b->lon, b->annual_consumption, b->household_size);
	});

	std::vector<ClusterRecord> out;
	std::size_t i = 0;
	while (i < sorted.size()) {
		std::size_t j = i;
		double pc = 0.0, lat = 0.0, lon = 0.0;
		while (j < sorted.size() && sorted[j]->cluster_id == sorted[i]->cluster_id) {
			pc += per_capita(*sorted[j]);
			lat += sorted[j]->lat;
			lon += sorted[j]->lon;
			++j;
		}
		const double n = static_cast<double>(j - i);
		ClusterRecord c;
		c.cluster_id = sorted[i]->cluster_id;
		c.lat = lat / n;
		c.lon = lon / n;
		c.consumption_per_capita = pc / n;
		c.n_households = j - i;
		out.push_back(std::move(c));
		i = j;
	}
	return out;
}

AttachResult attach_covariate(std::span<const ClusterRecord> clusters, const raster::RasterGrid& grid,
                              double half_extent_km, const std::string& name)
{
	AttachResult res;
	for (const auto& c : clusters) {
		try {
			const double v = raster::box_mean(grid, c.lat, c.lon, half_extent_km);
			ClusterRecord out = c;
			out.covariates[name] = v;
			res.clusters.push_back(std::move(out));
		} catch (const raster::RasterError& e) {
			if (e.code() != raster::RasterErrc::EmptyBox)
				throw;
			res.dropped.push_back(c.cluster_id);
			res.warnings.push_back("cluster " + c.cluster_id + " dropped: no valid " + name + " coverage");
		}
	}
	if (res.clusters.empty() && !clusters.empty())
		throw SurveyError(SurveyErrc::AllClustersDropped, "attach_covariate: no cluster has valid '" + name + "' coverage");
	return res;
}

std::string write_cluster_table(std::span<const ClusterRecord> clusters)
{
	std::set<std::string> names;
	for (const auto& c : clusters)
		for (const auto& [k, v] : c.covariates)
			names.insert(k);

	std::vector<std::string> header = {"cluster_id", "lat", "lon", "consumption_per_capita", "n_households"};
	header.insert(header.end(), names.begin(), names.end());
	header.push_back("bin");
	std::string out = csv::join(header) + "\n";
	for (const auto& c : clusters) {
		std::vector<std::string> f = {c.cluster_id, format_double(c.lat), format_double(c.lon),
		                              format_double(c.consumption_per_capita), std::to_string(c.n_households)};
		for (const auto& n : names) {
			auto it = c.covariates.find(n);
			f.push_back(it == c.covariates.end() ? "" : format_double(it->second));
		}
		f.push_back(c.bin ? std::to_string(*c.bin) : "");
		out += csv::join(f) + "\n";
	}
	return out;
}

std::vector<ClusterRecord> read_cluster_table(std::string_view csv_text)
{
	const auto table = csv::parse(csv_text);
	static constexpr std::string_view fixed[] = {"cluster_id", "lat", "lon", "consumption_per_capita", "n_households"};
	for (std::size_t i = 0; i < 5; ++i)
		if (table.column(fixed[i]) != static_cast<long>(i))
			throw SurveyError(SurveyErrc::MissingColumn, "cluster table: expected column '" + std::string(fixed[i]) + "'");
	const long bin_col = table.column("bin");
	if (bin_col < 0)
		throw SurveyError(SurveyErrc::MissingColumn, "cluster table: missing column 'bin'");

	std::vector<ClusterRecord> out;
	for (std::size_t r = 0; r < table.rows.size(); ++r) {
		const auto& f = table.rows[r];
		const std::string where = "cluster table line " + std::to_string(table.lines[r]);
		if (f.size() != table.header.size())
			throw SurveyError(SurveyErrc::BadValue, where + ": wrong field count");
		ClusterRecord c;
		c.cluster_id = f[0];
		c.lat = parse_number(f[1], where);
		c.lon = parse_number(f[2], where);
		c.consumption_per_capita = parse_number(f[3], where);
		c.n_households = static_cast<std::size_t>(parse_number(f[4], where));
		for (long k = 5; k < bin_col; ++k)
			if (!f[k].empty())
				c.covariates[table.header[k]] = parse_number(f[k], where);
		if (!f[bin_col].empty())
			c.bin = static_cast<int>(parse_number(f[bin_col], where));
		out.push_back(std::move(c));
	}
	return out;
}

} // namespace terrapov::survey
