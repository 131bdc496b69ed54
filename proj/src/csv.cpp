#include "terrapov/csv.hpp"

#include "terrapov/common.hpp"

namespace terrapov::csv {

namespace {

std::string trim(std::string_view s)
{
	const auto b = s.find_first_not_of(" \t\r");
	if (b == std::string_view::npos)
		return {};
	const auto e = s.find_last_not_of(" \t\r");
	return std::string(s.substr(b, e - b + 1));
}

} // namespace

long Table::column(std::string_view name) const
{
	for (std::size_t i = 0; i < header.size(); ++i)
		if (header[i] == name)
			return static_cast<long>(i);
	return -1;
}

Table parse(std::string_view text)
{
	Table t;
	std::vector<std::string> fields;
	std::string field;
	bool quoted = false, was_quoted = false;
	std::size_t line = 1, record_line = 1;

	auto end_field = [&] {
		fields.push_back(was_quoted ? field : trim(field));
		field.clear();
		was_quoted = false;
	};
	auto end_record = [&] {
		end_field();
		const bool blank = fields.size() == 1 && fields[0].empty();
		if (!blank) {
			if (t.header.empty() && t.rows.empty())
				t.header = std::move(fields);
			else {
				t.rows.push_back(std::move(fields));
				t.lines.push_back(record_line);
			}
		}
		fields.clear();
	};

	for (std::size_t i = 0; i < text.size(); ++i) {
		const char c = text[i];
		if (quoted) {
			if (c == '"') {
				if (i + 1 < text.size() && text[i + 1] == '"') {
					field.push_back('"');
					++i;
				} else
					quoted = false;
			} else {
				if (c == '\n')
					++line;
				field.push_back(c);
			}
			continue;
		}
		if (c == '"' && trim(field).empty()) {
			field.clear();
			quoted = was_quoted = true;
		} else if (c == ',')
			end_field();
		else if (c == '\n') {
			end_record();
			record_line = ++line;
		} else
			field.push_back(c);
	}
	if (quoted)
		throw Error("csv: unterminated quoted field starting near line " + std::to_string(record_line));
	if (!field.empty() || !fields.empty())
		end_record();
	return t;
}

std::string escape(std::string_view field)
{
	if (field.find_first_of(",\"\n\r") == std::string_view::npos)
		return std::string(field);
	std::string out = "\"";
	for (char c : field) {
		if (c == '"')
			out.push_back('"');
		out.push_back(c);
	}
	out.push_back('"');
	return out;
}

std::string join(const std::vector<std::string>& fields)
{
	std::string out;
	for (std::size_t i = 0; i < fields.size(); ++i) {
		if (i)
			out.push_back(',');
		out += escape(fields[i]);
	}
	return out;
}

} // namespace terrapov::csv
