//! Reading the two input tables, synthetic data with injected clusters,
//! and result serialization.

mod aggregated;
mod cases;
mod results;
mod synth;

pub use aggregated::{read_aggregated_counts, AggregatedCounts, TimeFormat, MISSING};
pub use cases::{
    read_case_records, CaseData, CaseOptions, CategoryDictionaries, DATE_COLUMN, DEMOGRAPHIC_COLUMNS, DRUG_PREFIX,
    TIME_ATTRIBUTE,
};
pub use results::{
    read_plot_rows, write_plot_rows, AttributeValues, ClusterReport, OutputBundle, PlotRow, PointRef, ResultsDocument,
    SubsetReport, Support,
};
pub use synth::{
    ball_members, monthly_layout, synth_cases, synth_points, write_case_rows, write_monthly_counts, InjectionKind,
    InjectionSpec, Region,
};
