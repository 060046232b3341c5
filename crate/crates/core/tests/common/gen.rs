//! Proptest strategies shared by the property and acceptance tests.

use batchtune::livenet::wire::PlanEntry;
use batchtune::livenet::Message;
use batchtune::monitor::StepReport;
use batchtune::speedmodel::SpeedModel;
use proptest::prelude::*;

/// Strictly increasing speed table with `knots` points whose batch sizes lie
/// in `[min_batch, max_batch]`.
pub fn monotone_model(
    class: &'static str,
    knots: std::ops::RangeInclusive<usize>,
    min_batch: u32,
    max_batch: u32,
) -> impl Strategy<Value = SpeedModel> {
    knots
        .prop_flat_map(move |k| {
            (
                proptest::collection::btree_set(min_batch..=max_batch, k),
                0.5f64..200.0,
                proptest::collection::vec(0.01f64..1.0, k),
            )
        })
        .prop_map(move |(batches, base, gains)| {
            let mut t = base;
            let pairs: Vec<(u32, f64)> = batches
                .into_iter()
                .zip(gains)
                .map(|(b, g)| {
                    let p = (b, t);
                    t += t * g;
                    p
                })
                .collect();
            SpeedModel::from_pairs(class, &pairs).unwrap()
        })
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_\\-\u{e9}\u{4e2d}]{0,24}"
}

pub fn message() -> impl Strategy<Value = Message> {
    let report = (text(), any::<u64>(), any::<u64>(), any::<f64>(), any::<f64>(), any::<f64>()).prop_map(
        |(node_id, generation, step_index, thr, cpu, wall)| {
            Message::StepReport(StepReport {
                node_id,
                generation,
                step_index,
                measured_throughput: thr,
                cpu_utilization: cpu,
                wall_time: wall,
            })
        },
    );
    let entry = (text(), any::<u32>(), any::<u64>(), any::<u64>()).prop_map(|(node_id, batch_size, share_offset, share_len)| {
        PlanEntry {
            node_id,
            batch_size,
            share_offset,
            share_len,
        }
    });
    prop_oneof![
        (any::<u16>(), text(), any::<u32>(), text()).prop_map(|(version, node_id, core_count, node_class)| {
            Message::Hello {
                version,
                node_id,
                core_count,
                node_class,
            }
        }),
        (proptest::collection::vec(any::<u32>(), 0..16), any::<u32>())
            .prop_map(|(batch_sizes, steps_per_probe)| Message::BenchRequest {
                batch_sizes,
                steps_per_probe
            }),
        (text(), any::<f64>(), proptest::collection::vec((any::<u32>(), any::<f64>()), 0..16)).prop_map(
            |(node_id, normal_cpu, points)| Message::BenchResult {
                node_id,
                normal_cpu,
                points
            }
        ),
        (any::<u64>(), any::<u64>(), proptest::collection::vec(entry, 0..12)).prop_map(
            |(generation, steps_per_epoch, entries)| Message::Plan {
                generation,
                steps_per_epoch,
                entries
            }
        ),
        (any::<u64>(), any::<u64>()).prop_map(|(generation, step)| Message::StepBegin { generation, step }),
        report,
        any::<u64>().prop_map(|generation| Message::RetuneNotice { generation }),
        any::<u64>().prop_map(|epoch| Message::EpochEnd { epoch }),
        Just(Message::Shutdown),
    ]
}
