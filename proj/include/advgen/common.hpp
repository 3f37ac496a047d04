#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <mutex>
#include <span>
#include <sstream>
#include <stdexcept>
#include <map>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace advgen {

/// Raised for every contract violation in the library. `key` names the
/// offending config key or input field when there is one.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, std::string key = {})
        : std::runtime_error(what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

enum class LogLevel { debug, info, warning, error };

inline std::string_view to_string(LogLevel level) {
    switch (level) {
        case LogLevel::debug: return "debug";
        case LogLevel::info: return "info";
        case LogLevel::warning: return "warning";
        case LogLevel::error: return "error";
    }
    return "?";
}

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {
struct LogState {
    std::mutex mutex;
    LogLevel threshold = LogLevel::info;
    LogSink sink;
};

inline LogState& log_state() {
    static LogState state;
    return state;
}
}  // namespace detail

/// Replace the process-wide log sink. Passing an empty sink restores stderr.
inline LogSink set_log_sink(LogSink sink) {
    auto& state = detail::log_state();
    std::lock_guard lock(state.mutex);
    std::swap(state.sink, sink);
    return sink;
}

inline void set_log_level(LogLevel level) {
    auto& state = detail::log_state();
    std::lock_guard lock(state.mutex);
    state.threshold = level;
}

inline void log(LogLevel level, std::string_view message) {
    auto& state = detail::log_state();
    std::lock_guard lock(state.mutex);
    if (state.sink) {
        state.sink(level, message);
        return;
    }
    if (level < state.threshold) return;
    std::cerr << "[" << to_string(level) << "] " << message << '\n';
}

inline void warn(std::string_view message) { log(LogLevel::warning, message); }
inline void info(std::string_view message) { log(LogLevel::info, message); }

/// RAII capture of log records, mostly for tests.
class ScopedLogCapture {
public:
    ScopedLogCapture() {
        previous_ = set_log_sink([this](LogLevel level, std::string_view msg) {
            std::lock_guard lock(mutex_);
            records_.emplace_back(level, std::string(msg));
        });
    }
    ~ScopedLogCapture() { set_log_sink(std::move(previous_)); }
    ScopedLogCapture(const ScopedLogCapture&) = delete;
    ScopedLogCapture& operator=(const ScopedLogCapture&) = delete;

    std::size_t count(LogLevel level) const {
        std::lock_guard lock(mutex_);
        std::size_t n = 0;
        for (const auto& [lvl, msg] : records_) n += lvl == level ? 1 : 0;
        return n;
    }

    bool contains(std::string_view needle) const {
        std::lock_guard lock(mutex_);
        for (const auto& [lvl, msg] : records_) {
            if (msg.find(needle) != std::string::npos) return true;
        }
        return false;
    }

private:
    mutable std::mutex mutex_;
    std::vector<std::pair<LogLevel, std::string>> records_;
    LogSink previous_;
};

// 64-bit FNV-1a. Used for parameter checksums and config hashes.
class Fnv1a {
public:
    void update(std::span<const std::byte> bytes) {
        for (auto b : bytes) {
            state_ ^= static_cast<std::uint64_t>(b);
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t value) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << value;
    return os.str();
}

inline void hash_tensor(Fnv1a& h, const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    h.update(std::string_view(c.scalar_type() == torch::kFloat ? "f32" : c.toString()));
    for (auto s : c.sizes()) h.update(std::to_string(s) + ",");
    h.update(std::span(static_cast<const std::byte*>(c.data_ptr()), c.nbytes()));
}

/// Checksum over every parameter and buffer of a module, in registration order.
inline std::string module_checksum(const torch::nn::Module& module) {
    Fnv1a h;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        h.update(item.key());
        hash_tensor(h, item.value());
    }
    for (const auto& item : module.named_buffers(/*recurse=*/true)) {
        h.update(item.key());
        hash_tensor(h, item.value());
    }
    return hex64(h.digest());
}

/// torch::load resizes tensors that disagree with the file, so shapes are compared afterwards.
template <typename ModuleHolder>
void load_module_strict(ModuleHolder& module, const std::string& path) {
    std::map<std::string, std::vector<std::int64_t>> shapes;
    for (const auto& item : module->named_parameters(true)) shapes[item.key()] = item.value().sizes().vec();
    for (const auto& item : module->named_buffers(true)) shapes[item.key()] = item.value().sizes().vec();
    torch::load(module, path);
    auto check = [&](const std::string& name, const torch::Tensor& t) {
        TORCH_CHECK(shapes.at(name) == t.sizes().vec(), "shape mismatch for ", name, ": file holds ", t.sizes());
    };
    for (const auto& item : module->named_parameters(true)) check(item.key(), item.value());
    for (const auto& item : module->named_buffers(true)) check(item.key(), item.value());
}

/// Single-threaded deterministic math for reproducible runs.
inline void enable_deterministic_mode() {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

}  // namespace advgen
