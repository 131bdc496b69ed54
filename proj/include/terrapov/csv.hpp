#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace terrapov::csv {

struct Table
{
	std::vector<std::string> header;
	std::vector<std::vector<std::string>> rows;
	/// 1-based source line of each row, for error messages.
	std::vector<std::size_t> lines;

	/// Column index by name, or -1.
	long column(std::string_view name) const;
};

/// RFC 4180-ish reader: comma separated, optional double quotes, blank lines
/// skipped, surrounding whitespace trimmed from unquoted fields.
Table parse(std::string_view text);

/// Quotes the field if it contains a comma, quote or newline.
std::string escape(std::string_view field);

std::string join(const std::vector<std::string>& fields);

} // namespace terrapov::csv
