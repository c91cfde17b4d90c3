#include "csvd/neighbors.hpp"

#include <algorithm>

namespace csvd {

std::vector<std::uint64_t> ResultSet::ids() const {
    std::vector<std::uint64_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.id);
    return out;
}

std::vector<double> ResultSet::distances() const {
    std::vector<double> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.distance);
    return out;
}

ResultSet KBest::finish(DistanceSpace space) && {
    std::vector<std::pair<double, std::uint64_t>> items;
    items.reserve(heap_.size());
    while (!heap_.empty()) {
        items.emplace_back(heap_.top().d2, heap_.top().id);
        heap_.pop();
    }
    return make_result(std::move(items), k_, space);
}

ResultSet make_result(std::vector<std::pair<double, std::uint64_t>> squared, std::size_t k_requested,
                      DistanceSpace space) {
    std::sort(squared.begin(), squared.end());
    ResultSet rs;
    rs.k_requested = k_requested;
    rs.space = space;
    rs.entries.reserve(squared.size());
    for (const auto& [d2, id] : squared) rs.entries.push_back({id, std::sqrt(d2)});
    return rs;
}

} // namespace csvd
