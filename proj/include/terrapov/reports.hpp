#pragma once

#include "terrapov/common.hpp"
#include "terrapov/regress.hpp"
#include "terrapov/survey.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace terrapov::reports {

enum class ReportErrc
{
	NoOverlap,
	BadZoneTable,
};

using ReportError = CodedError<ReportErrc>;

struct ZoneRow
{
	std::string cluster_id;
	std::string zone_id;
	std::string zone_name;
};

using ZoneTable = std::vector<ZoneRow>;

/// cluster_id,zone_id,zone_name; a cluster may appear at most once.
ZoneTable parse_zone_table(std::string_view csv_text);

/// cluster_id,actual,predicted,fold, in report order.
std::string scatter_csv(const regress::CvReport& report);
/// pooled_r2,best_alpha (one data row).
std::string scatter_summary_csv(const regress::CvReport& report);

/// Writes `out` and the summary next to it as <stem>_summary.csv.
void report_scatter(const regress::CvReport& report, const std::filesystem::path& out);

struct ZoneSummary
{
	std::string zone_id;
	std::string zone_name;
	std::size_t n_clusters = 0;
	double mean_actual = 0.0;
	double mean_predicted = 0.0;
	/// Min-max scaled across zones; 0 when every zone has the same mean.
	double normalized_actual = 0.0;
	double normalized_predicted = 0.0;
	double centroid_lat = 0.0;
	double centroid_lon = 0.0;
};

struct ZoneReport
{
	/// Sorted by zone_id.
	std::vector<ZoneSummary> zones;
	/// Predicted clusters with no zone row.
	std::size_t excluded = 0;
	std::vector<std::string> warnings;

	std::string csv() const;
	nlohmann::json geojson() const;
};

/// Cluster locations come from `clusters`; clusters missing there are
/// treated like clusters missing from the zone table.
ZoneReport zone_report(const regress::CvReport& report, const ZoneTable& zones,
                       std::span<const survey::ClusterRecord> clusters);

/// Writes `out` (CSV) and <stem>.geojson.
ZoneReport report_zones(const regress::CvReport& report, const ZoneTable& zones,
                        std::span<const survey::ClusterRecord> clusters, const std::filesystem::path& out);

} // namespace terrapov::reports
