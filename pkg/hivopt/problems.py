from hivopt._problems.closed_form import ClosedFormProblem
