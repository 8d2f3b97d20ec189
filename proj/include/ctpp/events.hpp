#pragma once

#include <fstream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctpp/errors.hpp"

namespace ctpp {

// One event: a categorical mark in [0, K) at a non-negative absolute time.
struct Event {
  int mark = 0;
  double time = 0.0;
  bool operator==(const Event&) const = default;
};

// Time-ordered realization of a marked point process. Histories are
// measured from t = 0, so the first event's preceding interval is time[0].
struct EventSequence {
  std::vector<Event> events;

  size_t size() const { return events.size(); }
  int mark(size_t i) const { return events[i].mark; }
  double time(size_t i) const { return events[i].time; }
  bool operator==(const EventSequence&) const = default;
};

struct Dataset {
  std::vector<EventSequence> train;
  std::vector<EventSequence> validation;
  std::vector<EventSequence> test;
  int num_marks = 0;
  double time_scale = 1.0;  // cumulative factor already applied to all times
};

// Interval statistics over a collection of sequences (Table-2 style).
struct DatasetStats {
  double delta = 0.0;  // mean inter-event interval
  double min_interval = 0.0;
  double max_interval = 0.0;
  long num_intervals = 0;
};

inline constexpr int kDefaultMaxLen = 256;

namespace detail {

inline EventSequence parse_record(const nlohmann::json& j, int num_marks, int max_len,
                                  long line_no) {
  const std::string where = "line " + std::to_string(line_no);
  if (!j.is_object() || !j.contains("marks") || !j.contains("times"))
    throw ParseError(where + ": record must be an object with 'marks' and 'times'");
  const auto& marks = j["marks"];
  const auto& times = j["times"];
  if (!marks.is_array() || !times.is_array())
    throw ParseError(where + ": 'marks' and 'times' must be arrays");
  if (marks.size() != times.size())
    throw ParseError(where + ": 'marks' and 'times' lengths differ (" +
                     std::to_string(marks.size()) + " vs " + std::to_string(times.size()) + ")");
  if (marks.empty()) throw ValidationError(where + ": empty sequence");

  EventSequence seq;
  const size_t keep = std::min(marks.size(), static_cast<size_t>(max_len));
  seq.events.reserve(keep);
  double prev = 0.0;
  for (size_t i = 0; i < keep; ++i) {
    if (!marks[i].is_number_integer())
      throw ParseError(where + ": mark at position " + std::to_string(i) + " is not an integer");
    if (!times[i].is_number())
      throw ParseError(where + ": time at position " + std::to_string(i) + " is not a number");
    const int m = marks[i].get<int>();
    const double t = times[i].get<double>();
    if (m < 0 || m >= num_marks)
      throw ValidationError(where + ": mark " + std::to_string(m) + " outside [0, " +
                            std::to_string(num_marks) + ")");
    if (t < 0.0) throw ValidationError(where + ": negative time " + std::to_string(t));
    if (i > 0 && t < prev)
      throw ValidationError(where + ": times decrease at position " + std::to_string(i));
    prev = t;
    seq.events.push_back({m, t});
  }
  return seq;
}

}  // namespace detail

// Parses JSON Lines records {"marks": [...], "times": [...]}. Over-long
// sequences keep their first max_len events.
inline std::vector<EventSequence> load_sequences(std::istream& in, int num_marks,
                                                 int max_len = kDefaultMaxLen) {
  if (num_marks < 1) throw ArgumentError("load_sequences: num_marks must be >= 1");
  if (max_len < 1) throw ArgumentError("load_sequences: max_len must be >= 1");
  std::vector<EventSequence> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(detail::parse_record(j, num_marks, max_len, line_no));
  }
  return out;
}

inline std::vector<EventSequence> load_sequences(const std::string& path, int num_marks,
                                                 int max_len = kDefaultMaxLen) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open data file: " + path);
  return load_sequences(in, num_marks, max_len);
}

// Single-file convenience: all sequences land in the train split.
inline Dataset load_jsonl(const std::string& path, int num_marks, int max_len = kDefaultMaxLen) {
  Dataset d;
  d.num_marks = num_marks;
  d.train = load_sequences(path, num_marks, max_len);
  return d;
}

inline Dataset load_dataset(const std::string& train_path, const std::string& val_path,
                            const std::string& test_path, int num_marks,
                            int max_len = kDefaultMaxLen) {
  Dataset d;
  d.num_marks = num_marks;
  d.train = load_sequences(train_path, num_marks, max_len);
  d.validation = load_sequences(val_path, num_marks, max_len);
  d.test = load_sequences(test_path, num_marks, max_len);
  return d;
}

inline std::string to_jsonl(const EventSequence& seq) {
  nlohmann::json marks = nlohmann::json::array();
  nlohmann::json times = nlohmann::json::array();
  for (const Event& e : seq.events) {
    marks.push_back(e.mark);
    times.push_back(e.time);
  }
  nlohmann::json j;
  j["marks"] = std::move(marks);
  j["times"] = std::move(times);
  return j.dump();
}

inline void save_sequences(std::ostream& out, std::span<const EventSequence> seqs) {
  for (const EventSequence& s : seqs) out << to_jsonl(s) << '\n';
}

inline void save_sequences(const std::string& path, std::span<const EventSequence> seqs) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot open output file: " + path);
  save_sequences(out, seqs);
}

inline DatasetStats compute_stats(std::span<const EventSequence> seqs) {
  DatasetStats st;
  double sum = 0.0;
  bool first = true;
  for (const EventSequence& s : seqs) {
    for (size_t i = 1; i < s.size(); ++i) {
      const double dt = s.time(i) - s.time(i - 1);
      sum += dt;
      ++st.num_intervals;
      if (first) {
        st.min_interval = st.max_interval = dt;
        first = false;
      } else {
        st.min_interval = std::min(st.min_interval, dt);
        st.max_interval = std::max(st.max_interval, dt);
      }
    }
  }
  if (st.num_intervals == 0)
    throw ValidationError("compute_stats: no intervals (all sequences have length 1)");
  st.delta = sum / static_cast<double>(st.num_intervals);
  return st;
}

// Stats are taken over the training split.
inline DatasetStats compute_stats(const Dataset& d) {
  return compute_stats(std::span<const EventSequence>(d.train));
}

// Multiplies every time by s and records the cumulative scale. Time-NLL
// values measured on the scaled data need a -ln(s) per-event correction to
// be comparable with unscaled runs.
inline Dataset rescale_times(Dataset d, double s) {
  if (!(s > 0.0)) throw ArgumentError("rescale_times: scale must be positive");
  for (auto* split : {&d.train, &d.validation, &d.test})
    for (EventSequence& seq : *split)
      for (Event& e : seq.events) e.time *= s;
  d.time_scale *= s;
  return d;
}

}  // namespace ctpp
