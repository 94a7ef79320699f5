pub(crate) use crate::gradcheck::{central_difference, relative_error as rel_err};
