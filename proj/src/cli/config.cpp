#include "fer/cli/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace fer::cli {
namespace {

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename N>
N parse_value(const std::string& key, const std::string& text)
{
    N v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw std::invalid_argument("config: bad value '" + text + "' for " + key);
    }
    return v;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters()
{
    static const std::map<std::string, Setter> table = {
        {"learning_rate", [](TrainConfig& c, const auto& k, const auto& v) { c.adam.learning_rate = parse_value<double>(k, v); }},
        {"beta1", [](TrainConfig& c, const auto& k, const auto& v) { c.adam.beta1 = parse_value<double>(k, v); }},
        {"beta2", [](TrainConfig& c, const auto& k, const auto& v) { c.adam.beta2 = parse_value<double>(k, v); }},
        {"epsilon", [](TrainConfig& c, const auto& k, const auto& v) { c.adam.epsilon = parse_value<double>(k, v); }},
        {"epochs", [](TrainConfig& c, const auto& k, const auto& v) { c.epochs = parse_value<std::size_t>(k, v); }},
        {"batch_size", [](TrainConfig& c, const auto& k, const auto& v) { c.batch_size = parse_value<std::size_t>(k, v); }},
        {"seed", [](TrainConfig& c, const auto& k, const auto& v) { c.seed = parse_value<std::uint64_t>(k, v); }},
        {"preset", [](TrainConfig& c, const auto&, const auto& v) { c.preset = v; }},
        {"augment.max_translation",
         [](TrainConfig& c, const auto& k, const auto& v) { c.augment.max_translation = parse_value<double>(k, v); }},
        {"augment.max_rotation",
         [](TrainConfig& c, const auto& k, const auto& v) { c.augment.max_rotation = parse_value<double>(k, v); }},
        {"augment.expansion",
         [](TrainConfig& c, const auto& k, const auto& v) { c.augment.expansion = parse_value<std::size_t>(k, v); }},
    };
    return table;
}

}  // namespace

std::map<std::string, std::string> parse_config(std::istream& in)
{
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text.front() == '#') {
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(text.substr(0, eq));
        const std::string value = trim(text.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key or value");
        }
        out[key] = value;
    }
    return out;
}

void apply_config(TrainConfig& config, const std::map<std::string, std::string>& entries)
{
    for (const auto& [key, value] : entries) {
        const auto it = setters().find(key);
        if (it == setters().end()) {
            throw std::invalid_argument("config: unknown key '" + key + "'");
        }
        it->second(config, key, value);
    }
}

std::string format_config(const TrainConfig& c)
{
    std::ostringstream out;
    out.precision(17);
    out << "learning_rate = " << c.adam.learning_rate << '\n'
        << "beta1 = " << c.adam.beta1 << '\n'
        << "beta2 = " << c.adam.beta2 << '\n'
        << "epsilon = " << c.adam.epsilon << '\n'
        << "epochs = " << c.epochs << '\n'
        << "batch_size = " << c.batch_size << '\n'
        << "seed = " << c.seed << '\n'
        << "preset = " << c.preset << '\n'
        << "augment.max_translation = " << c.augment.max_translation << '\n'
        << "augment.max_rotation = " << c.augment.max_rotation << '\n'
        << "augment.expansion = " << c.augment.expansion << '\n';
    return out.str();
}

}  // namespace fer::cli
