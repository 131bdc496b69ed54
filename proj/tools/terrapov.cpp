// Command-line front end. Exit codes: 0 success, 1 validation error, 2 stage failure.

#include "terrapov/pipeline.hpp"
#include "terrapov/reports.hpp"
#include "terrapov/synthetic_world.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>

namespace fs = std::filesystem;
using namespace terrapov;

namespace {

int print_run(const pipeline::RunManifest& m)
{
	for (const auto& s : m.stages)
		std::cout << pipeline::stage_name(s.stage) << (s.cache_hit ? " cached " : " ran ") << s.output_digest.substr(0, 16)
		          << "\n";
	if (m.metrics) {
		std::cout << "bin_accuracy " << format_double(m.metrics->bin_accuracy) << "\n"
		          << "best_alpha " << format_double(m.metrics->best_alpha) << "\n"
		          << "pooled_r2 " << format_double(m.metrics->pooled_r2) << "\n";
	}
	return 0;
}

} // namespace

int main(int argc, char** argv)
{
	CLI::App app{"terrapov: imagery-to-consumption transfer pipeline"};
	app.require_subcommand(1);

	std::string config_path;
	bool quiet = false;
	auto add_config = [&](CLI::App* sub) {
		sub->add_option("-c,--config", config_path, "pipeline config JSON")->required();
		sub->add_flag("-q,--quiet", quiet, "no progress output");
	};

	auto* validate = app.add_subcommand("validate", "check a config and its input paths");
	add_config(validate);
	auto* run = app.add_subcommand("run", "run every stage");
	add_config(run);

	std::vector<std::string> compare_names;
	auto* compare = app.add_subcommand("compare-covariates", "run once per covariate and tabulate metrics");
	add_config(compare);
	compare->add_option("--covariate", compare_names, "covariates to compare (default: all configured)");

	std::string report_path, out_path, zones_path, clusters_path;
	auto* scatter = app.add_subcommand("report-scatter", "actual vs predicted CSV from a cv_report.json");
	scatter->add_option("--report", report_path, "cv_report.json")->required();
	scatter->add_option("-o,--out", out_path, "output CSV")->required();
	auto* zones = app.add_subcommand("report-zones", "per-zone normalized consumption table");
	zones->add_option("--report", report_path, "cv_report.json")->required();
	zones->add_option("--zones", zones_path, "zone table CSV")->required();
	zones->add_option("--clusters", clusters_path, "cluster table CSV (locations)")->required();
	zones->add_option("-o,--out", out_path, "output CSV")->required();

	std::vector<std::pair<CLI::App*, pipeline::Stage>> stage_verbs;
	for (auto s : {pipeline::Stage::Ingest, pipeline::Stage::Bin, pipeline::Stage::Tiles, pipeline::Stage::Train,
	               pipeline::Stage::Features, pipeline::Stage::Regress}) {
		auto* sub = app.add_subcommand(pipeline::stage_name(s), std::string("run stages up to ") + pipeline::stage_name(s));
		add_config(sub);
		stage_verbs.emplace_back(sub, s);
	}

	std::string synth_dir;
	std::uint64_t synth_seed = 7;
	int synth_clusters = 30;
	auto* synth = app.add_subcommand("synth", "write a synthetic demo dataset and config");
	synth->add_option("-o,--out", synth_dir, "output directory")->required();
	synth->add_option("--seed", synth_seed, "generator and pipeline seed");
	synth->add_option("--clusters", synth_clusters, "number of clusters");

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int rc = app.exit(e);
		return rc == 0 ? 0 : 1;
	}

	pipeline::RunOptions opts;
	opts.log = quiet ? nullptr : &std::cerr;
	try {
		if (*validate) {
			pipeline::PipelineConfig::load(config_path).validate();
			std::cout << "config ok\n";
			return 0;
		}
		if (*run)
			return print_run(pipeline::run(pipeline::PipelineConfig::load(config_path), opts));
		for (const auto& [sub, stage] : stage_verbs) {
			if (*sub) {
				opts.until = stage;
				return print_run(pipeline::run(pipeline::PipelineConfig::load(config_path), opts));
			}
		}
		if (*compare) {
			const auto cfg = pipeline::PipelineConfig::load(config_path);
			std::vector<pipeline::CovariateSource> covs;
			for (const auto& c : cfg.covariates)
				if (compare_names.empty() || std::find(compare_names.begin(), compare_names.end(), c.name) != compare_names.end())
					covs.push_back(c);
			const auto rows = pipeline::compare_covariates(cfg, covs, opts);
			std::cout << pipeline::comparison_csv(rows);
			return 0;
		}
		if (*scatter) {
			const auto rep = regress::CvReport::from_json(nlohmann::json::parse(read_text(report_path)));
			reports::report_scatter(rep, out_path);
			return 0;
		}
		if (*zones) {
			const auto rep = regress::CvReport::from_json(nlohmann::json::parse(read_text(report_path)));
			const auto table = reports::parse_zone_table(read_text(zones_path));
			const auto clusters = survey::read_cluster_table(read_text(clusters_path));
			const auto r = reports::report_zones(rep, table, clusters, out_path);
			for (const auto& w : r.warnings)
				std::cerr << "warning: " << w << "\n";
			return 0;
		}
		if (*synth) {
			synth::WorldOptions wo;
			wo.seed = synth_seed;
			wo.n_clusters = synth_clusters;
			synth::write_world(synth::make_world(wo), synth_dir);
			write_file_atomic(fs::path(synth_dir) / "config.json", pipeline::synthetic_config_json(synth_seed).dump(2) + "\n");
			std::cout << "wrote " << (fs::path(synth_dir) / "config.json").string() << "\n";
			return 0;
		}
	} catch (const pipeline::PipelineError& e) {
		std::cerr << "error: " << e.what() << "\n";
		return e.code() == pipeline::PipelineErrc::Validation ? 1 : 2;
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << "\n";
		return 2;
	}
	return 1;
}
