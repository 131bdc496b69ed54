#include "terrapov/reports.hpp"

#include "terrapov/csv.hpp"

#include <map>
#include <set>

namespace terrapov::reports {

ZoneTable parse_zone_table(std::string_view csv_text)
{
	const auto table = csv::parse(csv_text);
	const long cid = table.column("cluster_id"), zid = table.column("zone_id"), zname = table.column("zone_name");
	if (cid < 0 || zid < 0 || zname < 0)
		throw ReportError(ReportErrc::BadZoneTable, "zone table needs columns cluster_id, zone_id, zone_name");
	ZoneTable out;
	std::set<std::string> seen;
	for (std::size_t r = 0; r < table.rows.size(); ++r) {
		const auto& f = table.rows[r];
		const std::string where = "zone table line " + std::to_string(table.lines[r]);
		if (f.size() < table.header.size())
			throw ReportError(ReportErrc::BadZoneTable, where + ": too few fields");
		ZoneRow row{f[cid], f[zid], f[zname]};
		if (row.cluster_id.empty() || row.zone_id.empty())
			throw ReportError(ReportErrc::BadZoneTable, where + ": empty identifier");
		if (!seen.insert(row.cluster_id).second)
			throw ReportError(ReportErrc::BadZoneTable, where + ": cluster " + row.cluster_id + " listed twice");
		out.push_back(std::move(row));
	}
	return out;
}

std::string scatter_csv(const regress::CvReport& report)
{
	return report.predictions_csv();
}

std::string scatter_summary_csv(const regress::CvReport& report)
{
	return "pooled_r2,best_alpha\n" + format_double(report.pooled_r2) + "," + format_double(report.best_alpha) + "\n";
}

void report_scatter(const regress::CvReport& report, const std::filesystem::path& out)
{
	if (out.has_parent_path())
		std::filesystem::create_directories(out.parent_path());
	write_file_atomic(out, scatter_csv(report));
	auto summary = out;
	summary.replace_filename(out.stem().string() + "_summary.csv");
	write_file_atomic(summary, scatter_summary_csv(report));
}

namespace {

struct Accum
{
	std::string name;
	std::size_t n = 0;
	double actual = 0.0, predicted = 0.0, lat = 0.0, lon = 0.0;
};

void min_max(std::vector<ZoneSummary>& zones, double ZoneSummary::*mean, double ZoneSummary::*norm)
{
	double lo = zones.front().*mean, hi = lo;
	for (const auto& z : zones) {
		lo = std::min(lo, z.*mean);
		hi = std::max(hi, z.*mean);
	}
	for (auto& z : zones)
		z.*norm = hi > lo ? (z.*mean - lo) / (hi - lo) : 0.0;
}

} // namespace

ZoneReport zone_report(const regress::CvReport& report, const ZoneTable& zones,
                       std::span<const survey::ClusterRecord> clusters)
{
	std::map<std::string, const ZoneRow*> zone_of;
	for (const auto& z : zones)
		zone_of[z.cluster_id] = &z;
	std::map<std::string, const survey::ClusterRecord*> where;
	for (const auto& c : clusters)
		where[c.cluster_id] = &c;

	ZoneReport out;
	std::map<std::string, Accum> acc;
	for (const auto& p : report.predictions) {
		auto z = zone_of.find(p.cluster_id);
		auto c = where.find(p.cluster_id);
		if (z == zone_of.end() || c == where.end()) {
			++out.excluded;
			out.warnings.push_back("cluster " + p.cluster_id + (z == zone_of.end() ? " has no zone" : " has no location"));
			continue;
		}
		auto& a = acc[z->second->zone_id];
		a.name = z->second->zone_name;
		++a.n;
		a.actual += p.actual;
		a.predicted += p.predicted;
		a.lat += c->second->lat;
		a.lon += c->second->lon;
	}
	if (acc.empty())
		throw ReportError(ReportErrc::NoOverlap, "zone table matches none of the predicted clusters");

	for (const auto& [id, a] : acc) {
		const double n = static_cast<double>(a.n);
		ZoneSummary z;
		z.zone_id = id;
		z.zone_name = a.name;
		z.n_clusters = a.n;
		z.mean_actual = a.actual / n;
		z.mean_predicted = a.predicted / n;
		z.centroid_lat = a.lat / n;
		z.centroid_lon = a.lon / n;
		out.zones.push_back(z);
	}
	min_max(out.zones, &ZoneSummary::mean_actual, &ZoneSummary::normalized_actual);
	min_max(out.zones, &ZoneSummary::mean_predicted, &ZoneSummary::normalized_predicted);
	return out;
}

std::string ZoneReport::csv() const
{
	std::string out = "zone_id,zone_name,n_clusters,mean_actual,mean_predicted,normalized_actual,normalized_predicted,"
	                  "centroid_lat,centroid_lon\n";
	for (const auto& z : zones)
		out += csv::join({z.zone_id, z.zone_name, std::to_string(z.n_clusters), format_double(z.mean_actual),
		                  format_double(z.mean_predicted), format_double(z.normalized_actual),
		                  format_double(z.normalized_predicted), format_double(z.centroid_lat),
		                  format_double(z.centroid_lon)}) +
		       "\n";
	return out;
}

nlohmann::json ZoneReport::geojson() const
{
	auto features = nlohmann::json::array();
	for (const auto& z : zones) {
		features.push_back({
		    {"type", "Feature"},
		    {"geometry", {{"type", "Point"}, {"coordinates", {z.centroid_lon, z.centroid_lat}}}},
		    {"properties",
		     {{"zone_id", z.zone_id},
		      {"zone_name", z.zone_name},
		      {"n_clusters", z.n_clusters},
		      {"mean_actual", z.mean_actual},
		      {"mean_predicted", z.mean_predicted},
		      {"normalized_actual", z.normalized_actual},
		      {"normalized_predicted", z.normalized_predicted}}},
		});
	}
	return {{"type", "FeatureCollection"}, {"features", features}};
}

ZoneReport report_zones(const regress::CvReport& report, const ZoneTable& zones,
                        std::span<const survey::ClusterRecord> clusters, const std::filesystem::path& out)
{
	ZoneReport r = zone_report(report, zones, clusters);
	if (out.has_parent_path())
		std::filesystem::create_directories(out.parent_path());
	write_file_atomic(out, r.csv());
	auto geo = out;
	geo.replace_extension(".geojson");
	write_file_atomic(geo, r.geojson().dump(2) + "\n");
	return r;
}

} // namespace terrapov::reports
