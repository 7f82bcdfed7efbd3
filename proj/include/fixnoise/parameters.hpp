#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fixnoise/tensor.hpp"

namespace fixnoise {

/// Ordered name -> tensor map. Insertion order is the checkpoint order and
/// never changes for a given config.
class ParameterStore {
public:
    using Entry = std::pair<std::string, Tensor>;

    Tensor& add(std::string name, Tensor value) {
        if (index_.count(name) != 0) throw ConfigError("duplicate parameter name " + name);
        value.set_requires_grad(true);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(value));
        return entries_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("no parameter named " + name);
        return entries_[it->second].second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("no parameter named " + name);
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, _] : entries_) out.push_back(name);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    /// Deep copy: fresh storage, no gradients.
    ParameterStore clone() const {
        ParameterStore out;
        for (const auto& [name, t] : entries_) out.add(name, t.detach());
        return out;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    /// Overwrite values of `name` from `other` (shapes must agree).
    void copy_from(const ParameterStore& other, const std::string& name) {
        const Tensor& src = other.at(name);
        Tensor& dst = at(name);
        if (src.shape() != dst.shape()) {
            throw DimensionError("parameter " + name + " shape " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
        }
        std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }

    bool same_layout(const ParameterStore& other) const {
        if (other.size() != size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].first != other.entries_[i].first) return false;
            if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
        }
        return true;
    }

    bool bitwise_equal(const ParameterStore& other) const {
        if (!same_layout(other)) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto a = entries_[i].second.data();
            const auto b = other.entries_[i].second.data();
            if (!std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
                    return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
                }))
                return false;
        }
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fixnoise
