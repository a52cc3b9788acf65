#pragma once

// Minimal RFC-4180 CSV reader/writer: quoted fields, doubled quotes, embedded
// separators and newlines. Missing values are represented as empty fields.

#include <string>
#include <string_view>
#include <vector>

#include "dallm/util.hpp"

namespace dallm::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    // 1-based physical line number of the first line of each row, for error messages
    std::vector<size_t> row_lines;
};

inline Table parse(std::string_view text) {
    Table table;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool any_field = false;
    size_t line = 1;
    size_t record_line = 1;

    auto end_field = [&] {
        record.push_back(field);
        field.clear();
        any_field = true;
    };
    auto end_record = [&] {
        end_field();
        if (table.header.empty()) {
            table.header = std::move(record);
        } else {
            table.rows.push_back(std::move(record));
            table.row_lines.push_back(record_line);
        }
        record = {};
        any_field = false;
        record_line = line;
    };

    for (size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        switch (c) {
            case '"':
                in_quotes = true;
                break;
            case ',':
                end_field();
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
                ++line;
                end_record();
                break;
            case '\n':
                ++line;
                end_record();
                break;
            default:
                field += c;
        }
    }
    if (in_quotes) throw DataError("csv: unterminated quoted field");
    if (any_field || !field.empty()) end_record();
    return table;
}

inline std::string escape_field(std::string_view field) {
    bool need_quotes = field.find_first_of(",\"\n\r") != std::string_view::npos;
    if (!need_quotes) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::string write_row(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += escape_field(fields[i]);
    }
    out += '\n';
    return out;
}

inline std::string write(const Table& table) {
    std::string out = write_row(table.header);
    for (const auto& row : table.rows) out += write_row(row);
    return out;
}

}  // namespace dallm::csv
