//! Auction vocabulary shared by every mechanism.

mod enumerate;
pub mod io;
mod types;

pub use enumerate::{allocations_excluding, enumerate_allocations, prefilter_top_ecpm, AllocationSet};
pub use types::{
    allocation_count, social_welfare, Ad, Allocation, AuctionConfig, AuctionInstance, OrganicItem,
    WelfareReport, DEFAULT_MAX_ALLOCATIONS, SCHEMA_VERSION, SW_EPSILON,
};
