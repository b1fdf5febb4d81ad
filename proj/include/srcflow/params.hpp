#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "srcflow/autograd.hpp"
#include "srcflow/error.hpp"

namespace srcflow {

/// Ordered collection of named parameter matrices. Order is insertion order
/// and is what checkpoints, optimizers and gradient checks iterate over.
template <class T>
class ParamSet {
public:
    struct Entry {
        std::string name;
        ag::Mat<T> value;
    };

    void add(std::string name, ag::Mat<T> value) {
        if (index_.contains(name)) throw Error("duplicate parameter " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{std::move(name), std::move(value)});
    }

    bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

    std::size_t index_of(std::string_view name) const {
        const auto it = index_.find(std::string(name));
        if (it == index_.end()) throw Error("unknown parameter " + std::string(name));
        return it->second;
    }

    const ag::Mat<T>& at(std::string_view name) const { return entries_[index_of(name)].value; }
    ag::Mat<T>& at(std::string_view name) { return entries_[index_of(name)].value; }

    std::vector<Entry>& entries() noexcept { return entries_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    /// Total number of scalars.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
        return n;
    }

    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& e : entries_) out.add(e.name, ag::Mat<T>::Zero(e.value.rows(), e.value.cols()));
        return out;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
        return out;
    }

    bool same_layout(const ParamSet& other) const {
        if (other.size() != size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = other.entries_[i];
            if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
        }
        return true;
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.value.allFinite()) return false;
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// A ParamSet placed on a tape. Every parameter becomes a leaf so that a
/// backward pass leaves its gradient on the tape.
template <class T>
class Bound {
public:
    Bound(ag::Tape<T>& tape, const ParamSet<T>& params) : tape_(&tape), params_(&params) {
        vars_.reserve(params.size());
        for (const auto& e : params.entries()) vars_.push_back(tape.leaf(e.value));
    }

    ag::Var<T> operator()(std::string_view name) const { return vars_[params_->index_of(name)]; }
    ag::Tape<T>& tape() const noexcept { return *tape_; }

    /// Gradients after Tape::backward; parameters the loss never touched get zeros.
    ParamSet<T> grads() const {
        ParamSet<T> out;
        const auto& entries = params_->entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const int id = vars_[i].id;
            if (tape_->has_grad(id))
                out.add(entries[i].name, tape_->grad(id));
            else
                out.add(entries[i].name, ag::Mat<T>::Zero(entries[i].value.rows(), entries[i].value.cols()));
        }
        return out;
    }

private:
    ag::Tape<T>* tape_;
    const ParamSet<T>* params_;
    std::vector<ag::Var<T>> vars_;
};

}  // namespace srcflow
