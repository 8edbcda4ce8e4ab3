#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "urbanst/errors.hpp"

namespace urbanst {

// Ordered `key = value` text records. Blank lines and `#` comments are
// skipped; a key may repeat (coordinate lists use this).
class KeyValueText {
public:
    static KeyValueText parse(std::string_view text, const std::string& origin = "<text>") {
        KeyValueText out;
        std::istringstream in{std::string(text)};
        std::string buffer;
        std::size_t line_no = 0;
        while (std::getline(in, buffer)) {
            ++line_no;
            std::string_view line = buffer;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) {
                line = line.substr(0, hash);
            }
            line = trim(line);
            if (line.empty()) {
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw FormatError(origin + ":" + std::to_string(line_no) + ": expected `key = value`");
            }
            out.entries_.emplace_back(std::string(trim(line.substr(0, eq))),
                                      std::string(trim(line.substr(eq + 1))));
        }
        return out;
    }

    static KeyValueText read_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot open " + path.string());
        }
        std::ostringstream buffer;
        buffer << in.rdbuf();
        return parse(buffer.str(), path.string());
    }

    void add(std::string key, std::string value) {
        entries_.emplace_back(std::move(key), std::move(value));
    }

    template <class T>
    void add(std::string key, const T& value) {
        std::ostringstream s;
        s.precision(17);
        s << value;
        entries_.emplace_back(std::move(key), s.str());
    }

    bool contains(std::string_view key) const {
        for (const auto& [k, v] : entries_) {
            if (k == key) {
                return true;
            }
        }
        return false;
    }

    // Last occurrence wins for scalar lookups.
    const std::string& raw(std::string_view key) const {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->first == key) {
                return it->second;
            }
        }
        throw FormatError("missing key `" + std::string(key) + "`");
    }

    std::vector<std::string> all(std::string_view key) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) {
            if (k == key) {
                out.push_back(v);
            }
        }
        return out;
    }

    template <class T>
    T get(std::string_view key) const {
        return convert<T>(raw(key), key);
    }

    template <class T>
    T get_or(std::string_view key, T fallback) const {
        return contains(key) ? get<T>(key) : fallback;
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string str() const {
        std::string out;
        for (const auto& [k, v] : entries_) {
            out += k;
            out += " = ";
            out += v;
            out += '\n';
        }
        return out;
    }

    void write_file(const std::filesystem::path& path, std::string_view header = {}) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        if (!header.empty()) {
            out << "# " << header << '\n';
        }
        out << str();
    }

    template <class T>
    static T convert(const std::string& text, std::string_view key = {}) {
        if constexpr (std::is_same_v<T, std::string>) {
            return text;
        } else if constexpr (std::is_same_v<T, bool>) {
            if (text == "true" || text == "1" || text == "yes") {
                return true;
            }
            if (text == "false" || text == "0" || text == "no") {
                return false;
            }
            throw FormatError("key `" + std::string(key) + "`: not a boolean: " + text);
        } else if constexpr (std::is_floating_point_v<T>) {
            try {
                std::size_t used = 0;
                const double v = std::stod(text, &used);
                if (used != text.size()) {
                    throw std::invalid_argument("trailing");
                }
                return static_cast<T>(v);
            } catch (const std::exception&) {
                throw FormatError("key `" + std::string(key) + "`: not a number: " + text);
            }
        } else {
            T v{};
            const auto* first = text.data();
            const auto* last = text.data() + text.size();
            const auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc{} || ptr != last) {
                throw FormatError("key `" + std::string(key) + "`: not an integer: " + text);
            }
            return v;
        }
    }

    static std::string_view trim(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
            s.remove_prefix(1);
        }
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
            s.remove_suffix(1);
        }
        return s;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

} // namespace urbanst
