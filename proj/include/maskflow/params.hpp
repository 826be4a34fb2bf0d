#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "maskflow/tensor.hpp"

namespace maskflow {

enum class Group { base_self_attn, base_cross_attn, lora, audio_cross_attn, other };

std::string_view group_name(Group g);
Group group_from_name(std::string_view name);
int group_code(Group g);
Group group_from_code(int code);

struct Param {
    Tensor value;
    Group group = Group::other;
};

// Named parameter map. Every parameter carries exactly one group tag; the
// trainable set decides which tensors a graph records as requiring grad.
class ParamStore {
public:
    void add(const std::string& name, Tensor value, Group group);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    void erase(const std::string& name) { params_.erase(name); }

    const Tensor& get(const std::string& name) const;
    Tensor& mutable_value(const std::string& name);
    Group group(const std::string& name) const;
    void set(const std::string& name, Tensor value);

    std::vector<std::string> names() const;
    std::vector<std::string> names_in(Group g) const;
    std::size_t size() const { return params_.size(); }
    std::size_t numel() const;

    void set_trainable(std::set<Group> groups) { trainable_ = std::move(groups); }
    const std::set<Group>& trainable_groups() const { return trainable_; }
    // Tensors named "buffer.*" are fitted statistics, never optimized.
    static bool is_buffer(const std::string& name) { return name.rfind("buffer.", 0) == 0; }
    bool is_trainable(const std::string& name) const {
        return !is_buffer(name) && trainable_.count(group(name)) != 0;
    }

    const std::map<std::string, Param>& entries() const { return params_; }

    // True when every tensor outside `groups` is byte-identical in `other`.
    bool frozen_equal(const ParamStore& other, const std::set<Group>& groups) const;

private:
    std::map<std::string, Param> params_;
    std::set<Group> trainable_ = {Group::base_self_attn, Group::base_cross_attn, Group::lora,
                                  Group::audio_cross_attn, Group::other};
};

using GradMap = std::map<std::string, Tensor>;

}  // namespace maskflow
