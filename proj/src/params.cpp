#include "maskflow/params.hpp"

#include "maskflow/errors.hpp"

namespace maskflow {

std::string_view group_name(Group g) {
    switch (g) {
        case Group::base_self_attn: return "base_self_attn";
        case Group::base_cross_attn: return "base_cross_attn";
        case Group::lora: return "lora";
        case Group::audio_cross_attn: return "audio_cross_attn";
        case Group::other: return "other";
    }
    return "other";
}

Group group_from_name(std::string_view name) {
    for (Group g : {Group::base_self_attn, Group::base_cross_attn, Group::lora, Group::audio_cross_attn, Group::other})
        if (group_name(g) == name) return g;
    throw FormatError("unknown parameter group '" + std::string(name) + "'");
}

int group_code(Group g) { return static_cast<int>(g); }

Group group_from_code(int code) {
    if (code < 0 || code > static_cast<int>(Group::other)) throw FormatError("bad group code " + std::to_string(code));
    return static_cast<Group>(code);
}

void ParamStore::add(const std::string& name, Tensor value, Group group) {
    if (!params_.emplace(name, Param{std::move(value), group}).second) {
        throw ArgumentError("duplicate parameter name '" + name + "'");
    }
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ArgumentError("no parameter '" + name + "'");
    return it->second.value;
}

Tensor& ParamStore::mutable_value(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ArgumentError("no parameter '" + name + "'");
    return it->second.value;
}

Group ParamStore::group(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ArgumentError("no parameter '" + name + "'");
    return it->second.group;
}

void ParamStore::set(const std::string& name, Tensor value) {
    Tensor& dst = mutable_value(name);
    if (dst.shape() != value.shape()) {
        throw DimensionError("parameter '" + name + "' shape " + shape_str(dst.shape()) + " vs " +
                             shape_str(value.shape()));
    }
    dst = std::move(value);
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
}

std::vector<std::string> ParamStore::names_in(Group g) const {
    std::vector<std::string> out;
    for (const auto& [k, p] : params_)
        if (p.group == g) out.push_back(k);
    return out;
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
}

bool ParamStore::frozen_equal(const ParamStore& other, const std::set<Group>& groups) const {
    for (const auto& [name, p] : params_) {
        if (groups.count(p.group)) continue;
        auto it = other.params_.find(name);
        if (it == other.params_.end() || it->second.group != p.group) return false;
        if (!p.value.bit_equal(it->second.value)) return false;
    }
    for (const auto& [name, p] : other.params_) {
        if (!groups.count(p.group) && !params_.count(name)) return false;
    }
    return true;
}

}  // namespace maskflow
